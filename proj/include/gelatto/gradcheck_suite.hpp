#pragma once

#include <string>
#include <vector>

#include "gelatto/network.hpp"

namespace gelatto {

struct GradcheckReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> entries;
  double tolerance = 0.0;
  std::string worst_name;
  double worst_err = 0.0;
  bool passed = false;
};

namespace gcdetail {

// Forward-only loss wrapper with a deliberately wrong backward rule (5% off),
// for the negative-control path of the suite.
inline Tensor corrupt_gradient(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.cdata()[i];
  out.set_requires_grad(true);
  tape.record([x, out]() {
    if (!out.has_grad()) return;
    double* g = x.grad_buffer();
    for (std::size_t i = 0; i < out.size(); ++i) g[i] += 1.05 * out.cgrad()[i];
  });
  return out;
}

}  // namespace gcdetail

/// Finite-difference check of every parameter of a small end-to-end network:
/// 24 points, 2 levels, feature width 8, 3 classes, composite loss, BN in
/// eval mode, dropout off. `inject_fault` corrupts one backward rule so the
/// suite must fail (negative control).
inline GradcheckReport run_micro_network_gradcheck(double tolerance = 1e-4,
                                                   bool inject_fault = false,
                                                   double fd_eps = 1e-5) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.stem_width = 8;
  cfg.levels = {{12, 0.25, 4, 8}, {6, 0.5, 4, 8}};
  cfg.bottleneck = 4;
  cfg.group_size = 1;
  cfg.head_mode = HeadMode::Both;
  SegModel model = SegModel::make(cfg, 2024);

  Rng rng(77);
  std::uniform_real_distribution<double> pos(-0.4, 0.4);
  std::uniform_real_distribution<double> col(0.0, 1.0);
  PointCloud cloud;
  const std::size_t n = 24;
  for (std::size_t i = 0; i < n; ++i) {
    cloud.positions.push_back({pos(rng), pos(rng), pos(rng) + 0.4});
    cloud.colors.push_back({col(rng), col(rng), col(rng)});
    cloud.labels.push_back(static_cast<int>(i % 3));
  }

  TrainConfig tc;
  tc.label_smoothing = 0.1;
  tc.aux_weights = {0.4, 0.4};

  ForwardOptions opts;
  opts.training = false;  // BN eval statistics, dropout off
  opts.deterministic = true;

  auto loss_fn = [&](Tape& tape) {
    PyramidState pyr = encoder_forward(tape, cloud, model, opts);
    DecoderOut dec = decoder_forward(tape, pyr, model, opts);
    LossBreakdown lb = composite_loss(tape, dec.main_logits, dec.aux_logits, cloud.labels, pyr, tc);
    if (inject_fault) return gcdetail::corrupt_gradient(tape, lb.total_tensor);
    return lb.total_tensor;
  };

  GradcheckReport report;
  report.tolerance = tolerance;
  model.visit_params([&](const std::string& name, Tensor& p) {
    if (name.rfind("cls.", 0) == 0) return;  // classification head is off this loss
    auto res = finite_diff_gradcheck([&](Tape& t, const Tensor&) { return loss_fn(t); }, p, fd_eps);
    report.entries.push_back({name, res.max_rel_err});
    if (res.max_rel_err > report.worst_err) {
      report.worst_err = res.max_rel_err;
      report.worst_name = name;
    }
  });
  report.passed = report.worst_err < tolerance;
  return report;
}

}  // namespace gelatto
