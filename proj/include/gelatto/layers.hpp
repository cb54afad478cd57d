#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gelatto/geometry.hpp"
#include "gelatto/tensor.hpp"

namespace gelatto {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

/// Shared pointwise layer: affine -> optional batch norm -> optional ReLU.
/// The same transform is applied at every leading-axis position, which is
/// what makes the whole network permutation-equivariant.
struct SharedMLP {
  Tensor weight;  // [Din, Dout]
  Tensor bias;    // [Dout]
  bool use_bn = false;
  bool use_relu = false;
  Tensor gamma, beta;                    // BN affine, [Dout]
  Tensor running_mean, running_var;      // BN eval statistics, [Dout]
  double momentum = 0.1;
  double bn_eps = 1e-5;

  static SharedMLP make(std::size_t din, std::size_t dout, bool bn, bool relu, Rng& rng) {
    SharedMLP m;
    const double bound = std::sqrt(6.0 / static_cast<double>(din));
    std::uniform_real_distribution<double> uni(-bound, bound);
    std::vector<double> w(din * dout);
    for (auto& v : w) v = uni(rng);
    m.weight = Tensor::from_values({din, dout}, std::move(w));
    m.weight.set_requires_grad(true);
    m.bias = Tensor::zeros({dout});
    m.bias.set_requires_grad(true);
    m.use_bn = bn;
    m.use_relu = relu;
    if (bn) {
      m.gamma = Tensor::constant({dout}, 1.0);
      m.gamma.set_requires_grad(true);
      m.beta = Tensor::zeros({dout});
      m.beta.set_requires_grad(true);
      m.running_mean = Tensor::zeros({dout});
      m.running_var = Tensor::constant({dout}, 1.0);
    }
    return m;
  }

  std::size_t in_dim() const { return weight.dim(0); }
  std::size_t out_dim() const { return weight.dim(1); }

  /// Training mode normalizes with batch statistics over all leading
  /// positions and updates the running stats; eval mode uses the running
  /// stats (initialized to mean 0 / var 1 before any training step).
  Tensor forward(Tape& tape, const Tensor& x, bool training) const {
    Tensor y = linear_pointwise(tape, x, weight, bias);
    if (use_bn) {
      if (training) {
        Tensor mean = channel_mean(tape, y);
        Tensor centered = sub(tape, y, broadcast_row(tape, mean, y));
        Tensor var = channel_mean(tape, mul(tape, centered, centered));
        Tensor inv_std = rsqrt_eps(tape, var, bn_eps);
        y = add_rowvec(tape, mul_rowvec(tape, centered, mul(tape, gamma, inv_std)), beta);
        update_running(mean, var);
      } else {
        Tensor centered = sub(tape, y, broadcast_row(tape, running_mean, y));
        Tensor inv_std = rsqrt_eps(tape, running_var, bn_eps);
        y = add_rowvec(tape, mul_rowvec(tape, centered, mul(tape, gamma, inv_std)), beta);
      }
    }
    if (use_relu) y = relu(tape, y);
    return y;
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    fn(prefix + ".weight", weight);
    fn(prefix + ".bias", bias);
    if (use_bn) {
      fn(prefix + ".gamma", gamma);
      fn(prefix + ".beta", beta);
    }
  }

  void visit_state(const std::string& prefix, const ParamVisitor& fn) {
    if (use_bn) {
      fn(prefix + ".running_mean", running_mean);
      fn(prefix + ".running_var", running_var);
    }
  }

 private:
  static Tensor broadcast_row(Tape& tape, const Tensor& v, const Tensor& like) {
    // mul_rowvec(ones, v) replicated to `like`'s shape without a new op
    Tensor ones = Tensor::constant(like.shape(), 1.0);
    return mul_rowvec(tape, ones, v);
  }

  void update_running(const Tensor& mean, const Tensor& var) const {
    double* rm = const_cast<double*>(running_mean.cdata());
    double* rv = const_cast<double*>(running_var.cdata());
    for (std::size_t j = 0; j < running_mean.size(); ++j) {
      rm[j] = (1.0 - momentum) * rm[j] + momentum * mean.cdata()[j];
      rv[j] = (1.0 - momentum) * rv[j] + momentum * var.cdata()[j];
    }
  }
};

/// Post-softmax attention scores captured per layer, [M,K,D] per head.
struct AttentionTrace {
  std::size_t m = 0, k = 0, d = 0;
  std::vector<double> geo;  // empty when the geometric head is off
  std::vector<double> lat;  // empty when the latent head is off
};

struct VectorAttentionOut {
  Tensor out;     // [M,D]
  Tensor scores;  // [M,K,D] post-softmax
};

/// Vector self-attention over the neighbor axis. The scorer produces D/D'
/// channels; each raw score is replicated D' times, softmax-normalized over
/// K, and applied elementwise. D'=1 gives one score per channel.
inline VectorAttentionOut vector_attention(Tape& tape, const Tensor& values,
                                           const SharedMLP& scorer, std::size_t group_size,
                                           bool training) {
  detail::require(values.rank() == 3, "vector_attention: values must be [M,K,D]");
  const std::size_t d = values.dim(2);
  if (group_size == 0 || d % group_size != 0)
    throw ContractError("vector_attention: D=" + std::to_string(d) + " not divisible by D'=" +
                        std::to_string(group_size));
  if (scorer.out_dim() != d / group_size)
    throw DimensionError("vector_attention: scorer emits " + std::to_string(scorer.out_dim()) +
                         " channels, want D/D'=" + std::to_string(d / group_size));
  Tensor raw = scorer.forward(tape, values, training);       // [M,K,D/D']
  Tensor grouped = softmax_axis(tape, raw, 1);               // softmax over K
  Tensor scores = repeat_channels(tape, grouped, group_size);  // [M,K,D]
  Tensor out = reduce(tape, mul(tape, scores, values), 1, Reduce::Sum);
  return {out, scores};
}

/// Multi-head scalar attention in the transformer convention: one softmax
/// weight per head, shared across the head's D/n channels. Reference for the
/// n_heads = D special case of vector_attention; forward only.
inline Tensor multi_head_attention_reference(Tape& tape, const Tensor& values,
                                             const SharedMLP& scorer, std::size_t n_heads,
                                             bool training = false) {
  detail::require(values.rank() == 3, "multi_head_attention_reference: values must be [M,K,D]");
  const std::size_t m = values.dim(0);
  const std::size_t k = values.dim(1);
  const std::size_t d = values.dim(2);
  if (n_heads == 0 || d % n_heads != 0)
    throw ContractError("multi_head_attention_reference: D=" + std::to_string(d) +
                        " not divisible by n_heads=" + std::to_string(n_heads));
  if (scorer.out_dim() != n_heads)
    throw DimensionError("multi_head_attention_reference: scorer emits " +
                         std::to_string(scorer.out_dim()) + " channels, want " +
                         std::to_string(n_heads));
  const std::size_t head_dim = d / n_heads;
  Tensor raw = scorer.forward(tape, values, training);  // [M,K,n_heads]
  Tensor out = Tensor::zeros({m, d});
  const double* pv = values.cdata();
  const double* pr = raw.cdata();
  double* po = out.data();
  std::vector<double> weights(k);
  for (std::size_t mi = 0; mi < m; ++mi)
    for (std::size_t h = 0; h < n_heads; ++h) {
      double mx = pr[(mi * k) * n_heads + h];
      for (std::size_t ki = 1; ki < k; ++ki)
        mx = std::max(mx, pr[(mi * k + ki) * n_heads + h]);
      double sum = 0.0;
      for (std::size_t ki = 0; ki < k; ++ki) {
        weights[ki] = std::exp(pr[(mi * k + ki) * n_heads + h] - mx);
        sum += weights[ki];
      }
      for (std::size_t ki = 0; ki < k; ++ki) weights[ki] /= sum;
      for (std::size_t c = h * head_dim; c < (h + 1) * head_dim; ++c) {
        double acc = 0.0;
        for (std::size_t ki = 0; ki < k; ++ki)
          acc += weights[ki] * pv[(mi * k + ki) * d + c];
        po[mi * d + c] = acc;
      }
    }
  return out;
}

/// Channelwise max over the neighbor axis; the residual-path aggregation.
inline Tensor neighborhood_maxpool(Tape& tape, const Tensor& values) {
  detail::require(values.rank() == 3, "neighborhood_maxpool: values must be [M,K,D]");
  return reduce(tape, values, 1, Reduce::Max);
}

enum class HeadMode { Both, GeometricOnly, LatentOnly, MaxPool };

inline std::string head_mode_name(HeadMode m) {
  switch (m) {
    case HeadMode::Both: return "both";
    case HeadMode::GeometricOnly: return "geometric";
    case HeadMode::LatentOnly: return "latent";
    case HeadMode::MaxPool: return "maxpool";
  }
  return "?";
}

inline HeadMode head_mode_from_name(const std::string& s) {
  if (s == "both") return HeadMode::Both;
  if (s == "geometric") return HeadMode::GeometricOnly;
  if (s == "latent") return HeadMode::LatentOnly;
  if (s == "maxpool") return HeadMode::MaxPool;
  throw ParseError("unknown head mode '" + s + "'");
}

/// The transforms of one two-headed layer. Latent-path maps are D->D,
/// geometric maps are 3->D, scorers D->D/D', and the output mixer is
/// 2D->D (D->D when one head is disabled). Feature transforms are plain
/// affine by default; `bn_relu_inside` switches them to BN+ReLU (the
/// scorers and the mixer stay affine).
struct GeLattoParams {
  SharedMLP f_r, f_rs, f_s;    // latent: centroid, neighbor-difference, neighbor
  SharedMLP f_p, f_pq, f_q;    // geometric: centroid, relative, absolute
  SharedMLP f_hg, f_gh;        // cross-injections H->G and G->H
  SharedMLP f_gg, f_hh;        // pre-attention projections
  SharedMLP f_g_att, f_h_att;  // attention scorers
  SharedMLP f_o;               // output mixer
  std::size_t dim = 0;
  std::size_t group_size = 1;  // D', features per attention score
  HeadMode mode = HeadMode::Both;

  static GeLattoParams make(std::size_t d, std::size_t group_size, HeadMode mode,
                            bool bn_relu_inside, Rng& rng) {
    if (group_size == 0 || d % group_size != 0)
      throw ContractError("GeLattoParams: D mod D' != 0");
    GeLattoParams p;
    p.dim = d;
    p.group_size = group_size;
    p.mode = mode;
    const bool bn = bn_relu_inside;
    p.f_r = SharedMLP::make(d, d, bn, bn, rng);
    p.f_rs = SharedMLP::make(d, d, bn, bn, rng);
    p.f_s = SharedMLP::make(d, d, bn, bn, rng);
    p.f_p = SharedMLP::make(3, d, bn, bn, rng);
    p.f_pq = SharedMLP::make(3, d, bn, bn, rng);
    p.f_q = SharedMLP::make(3, d, bn, bn, rng);
    p.f_hg = SharedMLP::make(d, d, bn, bn, rng);
    p.f_gh = SharedMLP::make(d, d, bn, bn, rng);
    p.f_gg = SharedMLP::make(d, d, bn, bn, rng);
    p.f_hh = SharedMLP::make(d, d, bn, bn, rng);
    p.f_g_att = SharedMLP::make(d, d / group_size, false, false, rng);
    p.f_h_att = SharedMLP::make(d, d / group_size, false, false, rng);
    const bool single = mode == HeadMode::GeometricOnly || mode == HeadMode::LatentOnly;
    p.f_o = SharedMLP::make(single ? d : 2 * d, d, false, false, rng);
    return p;
  }

  void visit_params(const std::string& prefix, const ParamVisitor& fn) {
    f_r.visit_params(prefix + ".f_r", fn);
    f_rs.visit_params(prefix + ".f_rs", fn);
    f_s.visit_params(prefix + ".f_s", fn);
    f_p.visit_params(prefix + ".f_p", fn);
    f_pq.visit_params(prefix + ".f_pq", fn);
    f_q.visit_params(prefix + ".f_q", fn);
    f_hg.visit_params(prefix + ".f_hg", fn);
    f_gh.visit_params(prefix + ".f_gh", fn);
    f_gg.visit_params(prefix + ".f_gg", fn);
    f_hh.visit_params(prefix + ".f_hh", fn);
    f_g_att.visit_params(prefix + ".f_g_att", fn);
    f_h_att.visit_params(prefix + ".f_h_att", fn);
    f_o.visit_params(prefix + ".f_o", fn);
  }

  void visit_state(const std::string& prefix, const ParamVisitor& fn) {
    f_r.visit_state(prefix + ".f_r", fn);
    f_rs.visit_state(prefix + ".f_rs", fn);
    f_s.visit_state(prefix + ".f_s", fn);
    f_p.visit_state(prefix + ".f_p", fn);
    f_pq.visit_state(prefix + ".f_pq", fn);
    f_q.visit_state(prefix + ".f_q", fn);
    f_hg.visit_state(prefix + ".f_hg", fn);
    f_gh.visit_state(prefix + ".f_gh", fn);
    f_gg.visit_state(prefix + ".f_gg", fn);
    f_hh.visit_state(prefix + ".f_hh", fn);
  }
};

struct GeLattoOut {
  Tensor out;  // [M,D]
  AttentionTrace trace;
};

/// The two-headed geometric/latent attention layer. Computation is strictly
/// sequential: H from the latent inputs, G augmented with H, H' augmented
/// with G, projections, per-head vector attention, concat + mix.
///
///   H  = f_r(Kr) + f_rs(S - Kr)
///   G  = f_p(Kp) + f_pq(Q - Kp) + f_q(Q) + f_hg(H)
///   H' = H + f_s(S) + f_gh(G)
///   G" = f_gg(G),  H" = f_hh(H')
///   G_i = attention(G"), H_i = attention(H")
///   O  = f_o([G_i ; H_i])
///
/// where K replicates a centroid vector K times along the neighbor axis.
/// A disabled head is dropped from the concat (f_o then takes D); MaxPool
/// mode replaces both attentions with a channelwise max over K.
inline GeLattoOut gelatto_forward(Tape& tape, const Tensor& centroid_positions,
                                  const NeighborIndex& nbr, const Tensor& parent_positions,
                                  const Tensor& centroid_features, const Tensor& parent_features,
                                  const GeLattoParams& params, bool training) {
  const std::size_t m = centroid_positions.dim(0);
  const std::size_t k = nbr.k;
  const std::size_t d = params.dim;
  detail::require(centroid_features.rank() == 2 && centroid_features.dim(0) == m &&
                      centroid_features.dim(1) == d,
                  "gelatto_forward: centroid features must be [M," + std::to_string(d) + "], got " +
                      shape_str(centroid_features.shape()));
  detail::require(parent_features.rank() == 2 && parent_features.dim(1) == d,
                  "gelatto_forward: parent features must be [N," + std::to_string(d) + "], got " +
                      shape_str(parent_features.shape()));
  detail::require(nbr.rows() == m, "gelatto_forward: neighbor rows do not match centroid count");

  const std::span<const std::size_t> idx(nbr.neighbors);
  Tensor q_pos = gather_rows(tape, parent_positions, idx, Shape{m, k});   // [M,K,3]
  Tensor s_feat = gather_rows(tape, parent_features, idx, Shape{m, k});   // [M,K,D]
  Tensor kp = replicate(tape, centroid_positions, 1, k);                  // [M,K,3]
  Tensor kr = replicate(tape, centroid_features, 1, k);                   // [M,K,D]

  Tensor h = add(tape, params.f_r.forward(tape, kr, training),
                 params.f_rs.forward(tape, sub(tape, s_feat, kr), training));

  Tensor g = add(tape,
                 add(tape,
                     add(tape, params.f_p.forward(tape, kp, training),
                         params.f_pq.forward(tape, sub(tape, q_pos, kp), training)),
                     params.f_q.forward(tape, q_pos, training)),
                 params.f_hg.forward(tape, h, training));

  const bool want_geo = params.mode != HeadMode::LatentOnly;
  const bool want_lat = params.mode != HeadMode::GeometricOnly;

  Tensor g_agg, h_agg;
  AttentionTrace trace;
  trace.m = m;
  trace.k = k;
  trace.d = d;

  Tensor h_prime;
  if (want_lat) {
    h_prime = add(tape, add(tape, h, params.f_s.forward(tape, s_feat, training)),
                  params.f_gh.forward(tape, g, training));
  }

  if (params.mode == HeadMode::MaxPool) {
    Tensor g_pp = params.f_gg.forward(tape, g, training);
    Tensor h_pp = params.f_hh.forward(tape, h_prime, training);
    g_agg = neighborhood_maxpool(tape, g_pp);
    h_agg = neighborhood_maxpool(tape, h_pp);
  } else {
    if (want_geo) {
      Tensor g_pp = params.f_gg.forward(tape, g, training);
      auto att = vector_attention(tape, g_pp, params.f_g_att, params.group_size, training);
      g_agg = att.out;
      trace.geo.assign(att.scores.cdata(), att.scores.cdata() + att.scores.size());
    }
    if (want_lat) {
      Tensor h_pp = params.f_hh.forward(tape, h_prime, training);
      auto att = vector_attention(tape, h_pp, params.f_h_att, params.group_size, training);
      h_agg = att.out;
      trace.lat.assign(att.scores.cdata(), att.scores.cdata() + att.scores.size());
    }
  }

  Tensor mixed;
  switch (params.mode) {
    case HeadMode::Both:
    case HeadMode::MaxPool:
      mixed = concat_last(tape, g_agg, h_agg);
      break;
    case HeadMode::GeometricOnly:
      mixed = g_agg;
      break;
    case HeadMode::LatentOnly:
      mixed = h_agg;
      break;
  }
  Tensor out = params.f_o.forward(tape, mixed, training);
  return {out, std::move(trace)};
}

}  // namespace gelatto
