#pragma once

// Numerical checks of the quantization-error results on small instances:
// the representation perturbation bound, the policy-gradient bias bound, the
// growth of value error with the discount factor, and the entropy shift of a
// fresh policy head between the ternary and full-precision pathways.
//
// Norm conventions. Token matrices use the max over tokens of the row L2 norm;
// latents, parameters and gradients use L2 (Frobenius for matrices).

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "bitrl/backbone.hpp"
#include "bitrl/envs.hpp"
#include "bitrl/error.hpp"
#include "bitrl/heads.hpp"
#include "bitrl/ppo.hpp"
#include "bitrl/quantizer.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

struct BoundCheckResult {
  double measured = 0.0;
  double bound = 0.0;
  bool holds = true;
  double slack_ratio = std::numeric_limits<double>::infinity();  // bound / measured
};

inline BoundCheckResult check_bound(double measured, double bound) {
  BoundCheckResult r;
  r.measured = measured;
  r.bound = bound;
  r.holds = measured <= bound * (1.0 + 1e-9);
  r.slack_ratio = measured > 0.0 ? bound / measured : std::numeric_limits<double>::infinity();
  return r;
}

inline nlohmann::ordered_json to_json(const BoundCheckResult& r) {
  nlohmann::ordered_json j;
  j["measured"] = r.measured;
  j["bound"] = r.bound;
  j["holds"] = r.holds;
  if (std::isfinite(r.slack_ratio)) j["slack_ratio"] = r.slack_ratio;
  else j["slack_ratio"] = "inf";
  return j;
}

// Forward Lipschitz bound of the encoder, one factor per residual block
// (1 + branch bound) followed by the final norm; product is their product.
struct LipschitzEstimate {
  std::vector<double> per_layer;
  double product = 1.0;
};

// Sensitivity of the latent to the linear weights. Replacing the weights one
// matrix at a time telescopes the latent difference into per-matrix terms,
// each at most unit_constants[u] * |dW_u|_F, so by Cauchy-Schwarz
//   |h_Q - h_FP| <= constant * |theta_Q - theta_FP|,  constant = sqrt(sum c_u^2).
struct SensitivityEstimate {
  LipschitzEstimate forward;
  std::vector<double> unit_constants;  // layer-major, (wq, wk, wv, wo, w1, w2)
  double constant = 0.0;               // L_f
  double sigma_floor = 0.0;            // layer-norm scale floor used
};

namespace detail {

inline DenseMatrix row_block(const DenseMatrix& m, std::size_t r0, std::size_t n) {
  DenseMatrix out(n, m.cols());
  for (std::size_t r = 0; r < n; ++r) {
    const auto src = m.row(r0 + r);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Spectral bound valid for both weights and every point between them.
inline double pair_spectral(const DenseMatrix& a, const DenseMatrix& b) {
  return std::max(spectral_norm_upper_bound(a), spectral_norm_upper_bound(b));
}

inline void require_matching(const ShadowBackbone& a, const ShadowBackbone& b) {
  if (!(a.config() == b.config())) throw Error(ErrorKind::dimension_mismatch, "theory: encoder architectures differ");
  if (!(a.embeddings() == b.embeddings()) || a.final_gain() != b.final_gain() || a.final_bias() != b.final_bias()) {
    throw Error(ErrorKind::dimension_mismatch, "theory: encoders differ outside the linear weights");
  }
  for (std::size_t l = 0; l < a.layers().size(); ++l) {
    const auto& x = a.layers()[l];
    const auto& y = b.layers()[l];
    if (x.ln1_gain != y.ln1_gain || x.ln1_bias != y.ln1_bias || x.ln2_gain != y.ln2_gain || x.ln2_bias != y.ln2_bias) {
      throw Error(ErrorKind::dimension_mismatch, "theory: encoders differ outside the linear weights");
    }
  }
}

}  // namespace detail

// sigma_floor bounds the layer-norm scale sqrt(var + eps) from below at every
// norm site; the norm is then |g|_inf / sigma_floor Lipschitz per token.
inline SensitivityEstimate estimate_sensitivity(const ShadowBackbone& fp, const ShadowBackbone& q, double sigma_floor) {
  detail::require_matching(fp, q);
  if (!(sigma_floor > 0.0)) throw Error(ErrorKind::invalid_argument, "sensitivity: sigma floor must be > 0");
  const std::size_t d = fp.model_dim();
  const std::size_t heads = fp.config().heads;
  const std::size_t dh = d / heads;
  const double sqrt_dh = std::sqrt(static_cast<double>(dh));
  const double sqrt_d = std::sqrt(static_cast<double>(d));
  auto ln_lip = [&](const DenseVector& g) { return detail::max_abs(g) / sigma_floor; };
  auto ln_radius = [&](const DenseVector& g, const DenseVector& b) { return sqrt_d * detail::max_abs(g) + norm2(b); };

  struct Block {
    double branch = 0.0;
    std::vector<double> unit_factor;  // c_u without the downstream factor
  };
  std::vector<Block> blocks;
  for (std::size_t l = 0; l < fp.layers().size(); ++l) {
    const auto& a = fp.layers()[l];
    const auto& b = q.layers()[l];
    const double r1 = ln_radius(a.ln1_gain, a.ln1_bias);
    std::vector<double> sq(heads), sk(heads), sv(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      sq[h] = detail::pair_spectral(detail::row_block(a.wq, h * dh, dh), detail::row_block(b.wq, h * dh, dh));
      sk[h] = detail::pair_spectral(detail::row_block(a.wk, h * dh, dh), detail::row_block(b.wk, h * dh, dh));
      sv[h] = detail::pair_spectral(detail::row_block(a.wv, h * dh, dh), detail::row_block(b.wv, h * dh, dh));
    }
    const double so = detail::pair_spectral(a.wo, b.wo);
    double core_sq = 0.0, ro_sq = 0.0, fq = 0.0, fk = 0.0;
    for (std::size_t h = 0; h < heads; ++h) {
      // Softmax moves at most 2 |ds|_inf of L1 mass; scores are bilinear in q, k.
      const double lh = sv[h] * (1.0 + 4.0 * r1 * r1 * sq[h] * sk[h] / sqrt_dh);
      core_sq += lh * lh;
      ro_sq += sv[h] * r1 * sv[h] * r1;
      fq = std::max(fq, 2.0 * sk[h] * sv[h] * r1 * r1 * r1 / sqrt_dh);
      fk = std::max(fk, 2.0 * sq[h] * sv[h] * r1 * r1 * r1 / sqrt_dh);
    }
    Block att;
    att.branch = ln_lip(a.ln1_gain) * std::sqrt(core_sq) * so;
    att.unit_factor = {so * fq, so * fk, so * r1, std::sqrt(ro_sq)};
    blocks.push_back(att);

    const double r2 = ln_radius(a.ln2_gain, a.ln2_bias);
    const double s1 = detail::pair_spectral(a.w1, b.w1);
    const double s2 = detail::pair_spectral(a.w2, b.w2);
    Block ffn;
    ffn.branch = ln_lip(a.ln2_gain) * s1 * s2;
    ffn.unit_factor = {s2 * r2, s1 * r2};
    blocks.push_back(ffn);
  }
  const double final_lip = ln_lip(fp.final_gain());

  SensitivityEstimate est;
  est.sigma_floor = sigma_floor;
  for (const auto& b : blocks) est.forward.per_layer.push_back(1.0 + b.branch);
  est.forward.per_layer.push_back(final_lip);
  for (double f : est.forward.per_layer) est.forward.product *= f;

  // downstream[i]: Lipschitz from the residual stream after block i to h.
  std::vector<double> downstream(blocks.size());
  double acc = final_lip;
  for (std::size_t i = blocks.size(); i-- > 0;) {
    downstream[i] = acc;
    acc *= 1.0 + blocks[i].branch;
  }
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    for (double f : blocks[i].unit_factor) {
      const double c = downstream[i] * f;
      est.unit_constants.push_back(c);
      sum_sq += c * c;
    }
  }
  est.constant = std::sqrt(sum_sq);
  return est;
}

inline PerturbationReport encoder_perturbation(const ShadowBackbone& fp, const ShadowBackbone& q) {
  detail::require_matching(fp, q);
  return perturbation_between(linear_parameters(fp), linear_parameters(q));
}

struct ReprBoundReport {
  BoundCheckResult check;
  SensitivityEstimate sensitivity;
  PerturbationReport perturbation;
  std::vector<double> per_input;  // |h_Q - h_FP| per input
  double max_latent_norm = 0.0;   // over both pathways
};

// The quantized pathway here runs the dequantized ternary weights with
// full-precision activations, isolating weight quantization.
inline ReprBoundReport verify_repr_bound(const ShadowBackbone& fp, const ShadowBackbone& q,
                                         const std::vector<std::vector<int>>& inputs) {
  detail::require_matching(fp, q);
  if (inputs.empty()) throw Error(ErrorKind::invalid_argument, "repr bound: no inputs");
  ReprBoundReport rep;
  EncodeTrace trace;
  double measured = 0.0;
  for (const auto& x : inputs) {
    const DenseVector a = encode(fp, x, &trace);
    const DenseVector b = encode(q, x, &trace);
    DenseVector diff(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) diff[i] = b[i] - a[i];
    rep.per_input.push_back(norm2(diff));
    measured = std::max(measured, rep.per_input.back());
    rep.max_latent_norm = std::max({rep.max_latent_norm, norm2(a), norm2(b)});
  }
  // Half the smallest observed scale, to cover the points between the two runs.
  rep.sensitivity = estimate_sensitivity(fp, q, 0.5 * trace.min_ln_sigma);
  rep.perturbation = encoder_perturbation(fp, q);
  const double bound = rep.sensitivity.constant * rep.perturbation.epsilon_q * rep.perturbation.theta_norm;
  rep.check = check_bound(measured, bound);
  return rep;
}

inline ReprBoundReport verify_repr_bound(const BackbonePair& pair, const std::vector<std::vector<int>>& inputs) {
  return verify_repr_bound(pair.shadow, dequantized(pair.model), inputs);
}

// One linear map, no nonlinearity: |(W_Q - W) x| <= |W_Q - W|_2 |x|.
inline BoundCheckResult verify_linear_bound(const DenseMatrix& w, const TernaryTensor& q, std::span<const double> x) {
  const DenseMatrix wq = dequantize(q);
  if (wq.rows() != w.rows() || wq.cols() != w.cols() || x.size() != w.cols()) {
    throw Error(ErrorKind::dimension_mismatch, "linear bound: shape mismatch");
  }
  DenseMatrix delta(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) delta.data()[i] = wq.data()[i] - w.data()[i];
  return check_bound(norm2(matvec(delta, x)), spectral_norm_upper_bound(delta) * norm2(x));
}

// ---------------------------------------------------------------------------
// Policy-gradient bias.

struct PolicyLipschitz {
  std::vector<double> per_block;  // (W1, b1, W2, b2, W3, b3)
  double constant = 0.0;          // L_pi
};

// Lipschitz constant, in the latent, of the per-sample on-policy gradient of
// -A log pi(a|h) - beta H(pi(.|h)) with respect to all head parameters, for
// |A| <= adv_max and |h| <= latent_bound.
inline PolicyLipschitz policy_lipschitz(const HeadParams& pi, double adv_max, double beta, double latent_bound) {
  if (pi.activation != HeadActivation::tanh) throw Error(ErrorKind::invalid_argument, "policy lipschitz: tanh head expected");
  const double na = static_cast<double>(pi.output_dim());
  const double ln_a = std::log(na);
  const double s1 = spectral_norm_upper_bound(pi.layers[0].w);
  const double s2 = spectral_norm_upper_bound(pi.layers[1].w);
  const double s3 = spectral_norm_upper_bound(pi.layers[2].w);
  const double n1 = std::sqrt(static_cast<double>(pi.layers[0].w.cols()));  // |a1| <= sqrt(width)
  const double n2 = std::sqrt(static_cast<double>(pi.layers[1].w.cols()));
  const double kappa = 4.0 / (3.0 * std::sqrt(3.0));  // Lipschitz constant of tanh'

  // Logit gradient: magnitude and Lipschitz constant in the logits.
  const double g3 = std::sqrt(2.0) * adv_max + 2.0 * beta * ln_a;
  const double lg = 0.5 * adv_max + beta * (0.5 + 1.0 / std::exp(1.0) + 5.0 * ln_a);
  const double la1 = s1, la2 = s1 * s2, lz = s1 * s2 * s3;

  const double ld3 = lg * lz;
  const double g2 = s3 * g3;
  const double ld2 = s3 * ld3 + s3 * g3 * kappa * la2;
  const double g1 = s2 * g2;
  const double ld1 = s2 * ld2 + s2 * g2 * kappa * la1;

  PolicyLipschitz out;
  out.per_block = {g1 + latent_bound * ld1, ld1, la1 * g2 + n1 * ld2, ld2, la2 * g3 + n2 * ld3, ld3};
  double s = 0.0;
  for (double c : out.per_block) s += c * c;
  out.constant = std::sqrt(s);
  return out;
}

struct PolicyBatch {
  std::vector<std::vector<int>> inputs;
  std::vector<std::size_t> actions;
  DenseVector advantages;
  double entropy_coef = 0.05;
};

// On-policy (ratio 1) gradient of the PPO objective at the given latents.
inline HeadGradients on_policy_gradient(const HeadParams& pi, const DenseMatrix& latents,
                                        std::span<const std::size_t> actions, std::span<const double> adv, double beta) {
  DenseVector old(latents.rows());
  for (std::size_t i = 0; i < latents.rows(); ++i) old[i] = log_softmax(policy_logits(pi, latents.row(i)))[actions[i]];
  // Any clip width leaves the gradient unchanged at ratio 1.
  return policy_loss_grad(pi, latents, actions, adv, old, 0.2, beta).grads;
}

struct GradientBiasReport {
  BoundCheckResult check;
  double policy_lipschitz = 0.0;
  ReprBoundReport repr;
};

inline GradientBiasReport measure_gradient_bias(const HeadParams& pi, const ShadowBackbone& fp, const ShadowBackbone& q,
                                                const PolicyBatch& batch) {
  const std::size_t n = batch.inputs.size();
  if (n == 0) throw Error(ErrorKind::invalid_argument, "gradient bias: batch empty");
  if (batch.actions.size() != n || batch.advantages.size() != n) {
    throw Error(ErrorKind::dimension_mismatch, "gradient bias: batch length mismatch");
  }
  GradientBiasReport rep;
  rep.repr = verify_repr_bound(fp, q, batch.inputs);
  DenseMatrix hf(n, fp.model_dim()), hq(n, fp.model_dim());
  for (std::size_t i = 0; i < n; ++i) {
    const DenseVector a = encode(fp, batch.inputs[i]);
    const DenseVector b = encode(q, batch.inputs[i]);
    std::copy(a.begin(), a.end(), hf.row(i).begin());
    std::copy(b.begin(), b.end(), hq.row(i).begin());
  }
  HeadGradients gf = on_policy_gradient(pi, hf, batch.actions, batch.advantages, batch.entropy_coef);
  const HeadGradients gq = on_policy_gradient(pi, hq, batch.actions, batch.advantages, batch.entropy_coef);
  gf.scale(-1.0);
  gf.add(gq);
  const double measured = std::sqrt(gf.sum_of_squares());
  const double adv_max = detail::max_abs(batch.advantages);
  rep.policy_lipschitz = policy_lipschitz(pi, adv_max, batch.entropy_coef, rep.repr.max_latent_norm).constant;
  const double bound = rep.policy_lipschitz * rep.repr.sensitivity.constant * rep.repr.perturbation.epsilon_q *
                       rep.repr.perturbation.theta_norm;
  rep.check = check_bound(measured, bound);
  return rep;
}

inline GradientBiasReport measure_gradient_bias(const HeadParams& pi, const BackbonePair& pair, const PolicyBatch& batch) {
  return measure_gradient_bias(pi, pair.shadow, dequantized(pair.model), batch);
}

// ---------------------------------------------------------------------------
// Value error against the discount factor.

namespace detail {

// Rank-revealing QR solve; nullopt if numerically singular.
inline std::optional<DenseVector> solve_linear(const DenseMatrix& a, const DenseVector& b) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n) throw Error(ErrorKind::dimension_mismatch, "solve: shape mismatch");
  const auto en = static_cast<Eigen::Index>(n);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> ma(a.data().data(), en, en);
  const Eigen::Map<const Eigen::VectorXd> mb(b.data(), en);
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(ma);
  if (qr.rank() < en) return std::nullopt;
  const Eigen::VectorXd x = qr.solve(mb);
  if (!x.allFinite()) return std::nullopt;
  return DenseVector(x.data(), x.data() + n);
}

}  // namespace detail

struct Transition {
  DenseVector obs, next_obs;
  double reward = 0.0;
  bool terminal = false;  // next_obs is not bootstrapped
};

// Transitions of the uniform random policy, and held-out states from separate
// episodes.
inline std::vector<Transition> uniform_policy_transitions(EnvId env, std::size_t count, RngStream& rng) {
  std::vector<Transition> out;
  EnvState st = reset(env, rng);
  while (out.size() < count) {
    Transition t;
    t.obs = st.obs;
    const StepResult r = step(st, rng.below(action_count(env)), rng);
    t.next_obs = r.next_obs;
    t.reward = r.reward;
    t.terminal = r.done;
    out.push_back(std::move(t));
    if (st.done) st = reset(env, rng);
  }
  return out;
}

inline std::vector<DenseVector> uniform_policy_states(EnvId env, std::size_t count, RngStream& rng) {
  std::vector<DenseVector> out;
  for (const auto& t : uniform_policy_transitions(env, count, rng)) out.push_back(t.obs);
  return out;
}

struct ValueFitBudget {
  std::size_t train_transitions = 3000;
  std::size_t heldout_states = 500;
  double ridge = 1e-3;  // per transition
};

struct AmplificationRow {
  double gamma = 0.0;
  double gap = 0.0;         // max |V_Q - V_FP| over held-out states
  double scaled_gap = 0.0;  // gap * (1 - gamma)
  bool converged = true;
};

struct AmplificationReport {
  std::vector<AmplificationRow> rows;
  bool monotone = false;     // over gamma > 0
  bool within_band = false;  // max/min scaled gap <= 10 over gamma > 0
  bool baseline_below = false;
};

inline nlohmann::ordered_json to_json(const AmplificationReport& r) {
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : r.rows) {
    j["rows"].push_back({{"gamma", row.gamma}, {"gap", row.gap}, {"scaled_gap", row.scaled_gap},
                         {"converged", row.converged}});
  }
  j["monotone"] = r.monotone;
  j["within_band"] = r.within_band;
  j["baseline_below"] = r.baseline_below;
  return j;
}

namespace detail {

// Fixed random tanh features of a value head (hidden layers) plus a constant.
inline DenseMatrix value_features(const HeadParams& head, const DenseMatrix& latents) {
  HeadCache cache;
  head_forward(head, latents, &cache);
  const DenseMatrix& h2 = cache.hidden2;
  DenseMatrix f(h2.rows(), h2.cols() + 1);
  for (std::size_t r = 0; r < h2.rows(); ++r) {
    auto src = h2.row(r);
    std::copy(src.begin(), src.end(), f.row(r).begin());
    f(r, h2.cols()) = 1.0;
  }
  return f;
}

// TD fixed point of the linear value function on features (LSTD with ridge).
inline std::optional<DenseVector> lstd(const DenseMatrix& phi, const DenseMatrix& phi_next,
                                       const std::vector<Transition>& data, double gamma, double ridge) {
  const std::size_t k = phi.cols();
  DenseMatrix a(k, k);
  DenseVector b(k, 0.0);
  std::vector<double> diff(k);
  for (std::size_t t = 0; t < data.size(); ++t) {
    const auto p = phi.row(t);
    const auto pn = phi_next.row(t);
    const double g = data[t].terminal ? 0.0 : gamma;
    for (std::size_t j = 0; j < k; ++j) diff[j] = p[j] - g * pn[j];
    for (std::size_t i = 0; i < k; ++i) {
      const double pi = p[i];
      if (pi == 0.0) continue;
      double* ai = a.row(i).data();
      for (std::size_t j = 0; j < k; ++j) ai[j] += pi * diff[j];
      b[i] += pi * data[t].reward;
    }
  }
  const double lambda = ridge * static_cast<double>(data.size());
  for (std::size_t i = 0; i < k; ++i) a(i, i) += lambda;
  return solve_linear(a, b);
}

template <class Linear>
DenseMatrix latents_of(const Encoder<Linear>& m, EnvId env, const std::vector<DenseVector>& obs) {
  DenseMatrix out(obs.size(), m.model_dim());
  LatentCache<Linear> cache(m);
  for (std::size_t i = 0; i < obs.size(); ++i) {
    const DenseVector& h = cache.get(tokenize_state(m.vocab(), env, obs[i]));
    std::copy(h.begin(), h.end(), out.row(i).begin());
  }
  return out;
}

}  // namespace detail

// For each discount the value function is fitted to its TD fixed point once on
// ternary latents and once on full-precision latents, with the same fixed
// random features and data; the gap is compared across the grid. A gamma of 0
// in the grid is treated as the no-bootstrap baseline row.
inline AmplificationReport verify_value_amplification(const BackbonePair& pair, EnvId env,
                                                      const std::vector<double>& gammas, RngStream& rng,
                                                      const ValueFitBudget& budget = {}) {
  if (gammas.empty()) throw Error(ErrorKind::invalid_argument, "amplification: empty gamma grid");
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    if (!(gammas[i] >= 0.0 && gammas[i] < 1.0)) throw Error(ErrorKind::invalid_argument, "amplification: gamma outside [0, 1)");
    if (i > 0 && !(gammas[i] > gammas[i - 1])) throw Error(ErrorKind::invalid_argument, "amplification: gamma grid must increase");
  }
  const std::vector<Transition> data = uniform_policy_transitions(env, budget.train_transitions, rng);
  const std::vector<DenseVector> heldout = uniform_policy_states(env, budget.heldout_states, rng);
  const HeadParams head = make_value_head(pair.model.model_dim(), rng);

  std::vector<DenseVector> obs, next_obs;
  for (const auto& t : data) {
    obs.push_back(t.obs);
    next_obs.push_back(t.next_obs);
  }
  struct Path {
    DenseMatrix phi, phi_next, phi_eval;
  };
  auto features = [&](const auto& model) {
    return Path{detail::value_features(head, detail::latents_of(model, env, obs)),
                detail::value_features(head, detail::latents_of(model, env, next_obs)),
                detail::value_features(head, detail::latents_of(model, env, heldout))};
  };
  const Path pq = features(pair.model);
  const Path pf = features(pair.shadow);

  AmplificationReport rep;
  for (double gamma : gammas) {
    AmplificationRow row;
    row.gamma = gamma;
    const auto wq = detail::lstd(pq.phi, pq.phi_next, data, gamma, budget.ridge);
    const auto wf = detail::lstd(pf.phi, pf.phi_next, data, gamma, budget.ridge);
    if (!wq || !wf) {
      row.converged = false;
      row.gap = std::numeric_limits<double>::quiet_NaN();
    } else {
      for (std::size_t i = 0; i < heldout.size(); ++i) {
        const double vq = dot(pq.phi_eval.row(i), *wq);
        const double vf = dot(pf.phi_eval.row(i), *wf);
        row.gap = std::max(row.gap, std::abs(vq - vf));
      }
    }
    row.scaled_gap = row.gap * (1.0 - gamma);
    rep.rows.push_back(row);
  }
  std::vector<const AmplificationRow*> pos;
  const AmplificationRow* base = nullptr;
  for (const auto& r : rep.rows) {
    if (r.gamma == 0.0) base = &r;
    else pos.push_back(&r);
  }
  rep.monotone = !pos.empty();
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (!pos[i]->converged || (i > 0 && pos[i]->gap < pos[i - 1]->gap)) rep.monotone = false;
    lo = std::min(lo, pos[i]->scaled_gap);
    hi = std::max(hi, pos[i]->scaled_gap);
  }
  rep.within_band = !pos.empty() && lo > 0.0 && hi <= 10.0 * lo;
  rep.baseline_below = true;
  if (base) {
    for (const auto* r : pos) {
      if (!(base->gap <= r->gap)) rep.baseline_below = false;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Entropy shift of a fresh policy head.

// Two-sided exact sign test; ties are dropped.
inline double sign_test_p(std::size_t positives, std::size_t negatives) {
  const std::size_t n = positives + negatives;
  if (n == 0) return 1.0;
  const std::size_t k = std::min(positives, negatives);
  // log-space binomial tail of Binomial(n, 1/2)
  double tail = 0.0;
  for (std::size_t i = 0; i <= k; ++i) {
    const double lc = std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0);
    tail += std::exp(lc - static_cast<double>(n) * std::log(2.0));
  }
  return std::min(1.0, 2.0 * tail);
}

struct EntropyPair {
  std::uint64_t seed = 0;
  double ternary = 0.0;
  double fp = 0.0;
  double delta = 0.0;
};

struct EntropyReport {
  std::vector<EntropyPair> pairs;
  double mean_ternary = 0.0;
  double mean_fp = 0.0;
  double mean_delta = 0.0;
  double relative_change = 0.0;  // mean_delta / mean_fp
  std::size_t positives = 0, negatives = 0;
  double p_value = 1.0;
  bool negative_flagged = false;
};

inline nlohmann::ordered_json to_json(const EntropyReport& r) {
  nlohmann::ordered_json j;
  j["pairs"] = nlohmann::ordered_json::array();
  for (const auto& p : r.pairs) {
    j["pairs"].push_back({{"seed", p.seed}, {"ternary", p.ternary}, {"fp", p.fp}, {"delta", p.delta}});
  }
  j["mean_ternary"] = r.mean_ternary;
  j["mean_fp"] = r.mean_fp;
  j["mean_delta"] = r.mean_delta;
  j["relative_change"] = r.relative_change;
  j["positives"] = r.positives;
  j["negatives"] = r.negatives;
  j["p_value"] = r.p_value;
  j["negative_flagged"] = r.negative_flagged;
  return j;
}

inline double mean_policy_entropy(const HeadParams& pi, const DenseMatrix& latents) {
  const DenseMatrix logits = head_forward(pi, latents);
  double s = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) s += entropy(softmax(logits.row(i)));
  return s / static_cast<double>(logits.rows());
}

inline EntropyPair entropy_pair(const BackbonePair& pair, const HeadParams& pi, EnvId env,
                                const std::vector<DenseVector>& states) {
  EntropyPair p;
  p.ternary = mean_policy_entropy(pi, detail::latents_of(pair.model, env, states));
  p.fp = mean_policy_entropy(pi, detail::latents_of(pair.shadow, env, states));
  p.delta = p.ternary - p.fp;
  return p;
}

inline EntropyReport summarize_entropy(std::vector<EntropyPair> pairs) {
  EntropyReport r;
  r.pairs = std::move(pairs);
  for (const auto& p : r.pairs) {
    r.mean_ternary += p.ternary;
    r.mean_fp += p.fp;
    r.mean_delta += p.delta;
    if (p.delta > 0.0) ++r.positives;
    if (p.delta < 0.0) ++r.negatives;
  }
  const double n = static_cast<double>(r.pairs.size());
  r.mean_ternary /= n;
  r.mean_fp /= n;
  r.mean_delta /= n;
  r.relative_change = r.mean_fp > 0.0 ? r.mean_delta / r.mean_fp : 0.0;
  r.p_value = sign_test_p(r.positives, r.negatives);
  r.negative_flagged = r.mean_delta < 0.0;
  return r;
}

// Seed s: backbone drawn with seed s under cfg, fresh policy head and states
// from the uniform random policy.
inline EntropyReport measure_entropy_delta(EnvId env, std::size_t seeds, const BackboneConfig& cfg = {},
                                           std::size_t states = 512) {
  if (seeds < 20) throw Error(ErrorKind::invalid_argument, "entropy: at least 20 paired seeds required");
  std::vector<EntropyPair> pairs;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    RngStream brng(s, 0);
    const BackbonePair pair = build_backbone(cfg, brng);
    RngStream hrng(s, kStreamHeads);
    const HeadParams pi = make_policy_head(cfg.model_dim, action_count(env), hrng);
    RngStream srng(s, kStreamEnv);
    EntropyPair p = entropy_pair(pair, pi, env, uniform_policy_states(env, states, srng));
    p.seed = s;
    pairs.push_back(p);
  }
  return summarize_entropy(std::move(pairs));
}

// ---------------------------------------------------------------------------
// Suites.

struct SuiteReport {
  std::string name;
  bool passed = false;
  nlohmann::ordered_json detail;
};

inline BackboneConfig small_backbone_config() {
  BackboneConfig c;
  c.layers = 2;
  c.model_dim = 64;
  c.heads = 4;
  c.ffn_dim = 128;
  return c;
}

inline std::vector<int> random_tokens(const Vocabulary& vocab, RngStream& rng) {
  const std::size_t len = 4 + rng.below(kMaxContext - 3);
  std::vector<int> t(len);
  for (int& id : t) id = static_cast<int>(2 + rng.below(vocab.size() - 2));
  return t;
}

inline SuiteReport run_lemma1_suite(std::size_t trials = 100, std::size_t inputs = 100, std::uint64_t seed = 0) {
  SuiteReport rep{"lemma1", true, {}};
  std::size_t held = 0;
  double min_slack = std::numeric_limits<double>::infinity();
  rep.detail["trials"] = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < trials; ++t) {
    RngStream rng(seed, 1000 + t);
    const BackbonePair pair = build_backbone(small_backbone_config(), rng);
    std::vector<std::vector<int>> xs;
    for (std::size_t i = 0; i < inputs; ++i) xs.push_back(random_tokens(pair.model.vocab(), rng));
    const ReprBoundReport r = verify_repr_bound(pair, xs);
    if (r.check.holds) ++held;
    min_slack = std::min(min_slack, r.check.slack_ratio);
    auto j = to_json(r.check);
    j["epsilon_q"] = r.perturbation.epsilon_q;
    j["lipschitz"] = r.sensitivity.constant;
    rep.detail["trials"].push_back(j);
  }
  rep.passed = held == trials;
  rep.detail["held"] = held;
  rep.detail["total"] = trials;
  rep.detail["min_slack_ratio"] = min_slack;
  return rep;
}

inline SuiteReport run_thm1_suite(std::size_t trials = 20, std::size_t batch = 32, std::uint64_t seed = 0) {
  SuiteReport rep{"thm1", true, {}};
  std::size_t held = 0;
  rep.detail["trials"] = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < trials; ++t) {
    RngStream rng(seed, 2000 + t);
    const BackboneConfig cfg = small_backbone_config();
    const BackbonePair pair = build_backbone(cfg, rng);
    // Output gain 1 so the logits, and the bias, are not negligible.
    const HeadParams pi = make_head(cfg.model_dim, 2 + rng.below(3), 1.0, rng);
    PolicyBatch b;
    for (std::size_t i = 0; i < batch; ++i) {
      b.inputs.push_back(random_tokens(pair.model.vocab(), rng));
      b.actions.push_back(rng.below(pi.output_dim()));
      b.advantages.push_back(rng.normal());
    }
    const GradientBiasReport r = measure_gradient_bias(pi, pair, b);
    if (r.check.holds) ++held;
    auto j = to_json(r.check);
    j["policy_lipschitz"] = r.policy_lipschitz;
    j["repr_lipschitz"] = r.repr.sensitivity.constant;
    rep.detail["trials"].push_back(j);
  }
  rep.passed = held == trials;
  rep.detail["held"] = held;
  rep.detail["total"] = trials;
  return rep;
}

inline SuiteReport run_thm2_suite(std::size_t seeds = 5, const ValueFitBudget& budget = {}) {
  SuiteReport rep{"thm2", true, {}};
  std::size_t monotone = 0, band = 0;
  rep.detail["seeds"] = nlohmann::ordered_json::array();
  for (std::uint64_t s = 0; s < seeds; ++s) {
    RngStream brng(s, 0);
    const BackbonePair pair = build_backbone(BackboneConfig{}, brng);
    RngStream rng(s, 3000);
    const AmplificationReport r = verify_value_amplification(pair, EnvId::cartpole, {0.0, 0.5, 0.9, 0.99}, rng, budget);
    if (r.monotone) ++monotone;
    if (r.within_band) ++band;
    rep.detail["seeds"].push_back(to_json(r));
  }
  // Trend holds in all but at most one seed.
  const std::size_t need = seeds > 0 ? seeds - seeds / 5 : 0;
  rep.passed = monotone >= need && band >= need;
  rep.detail["monotone"] = monotone;
  rep.detail["within_band"] = band;
  rep.detail["total"] = seeds;
  return rep;
}

inline SuiteReport run_entropy_suite(std::size_t seeds = 20) {
  SuiteReport rep{"entropy", true, {}};
  const EntropyReport r = measure_entropy_delta(EnvId::cartpole, seeds);
  rep.detail = to_json(r);
  // Only a positive shift is asserted to be significant; a negative one is flagged.
  rep.passed = r.mean_delta <= 0.0 || r.p_value < 0.1;
  return rep;
}

}  // namespace bitrl
