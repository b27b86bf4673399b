#pragma once

// Frozen-backbone PPO: rollout collection through serialize -> tokenize ->
// encode, GAE, the clipped surrogate update with an entropy bonus, critic
// variants (ternary latents, full-precision shadow latents, ensembles) and
// per-update training metrics.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "bitrl/backbone.hpp"
#include "bitrl/checkpoint.hpp"
#include "bitrl/envs.hpp"
#include "bitrl/error.hpp"
#include "bitrl/heads.hpp"
#include "bitrl/tensor.hpp"
#include "bitrl/text.hpp"

namespace bitrl {

// ---------------------------------------------------------------------------
// Configuration.

enum class CriticMode { ternary, fp32, ensemble };

struct CriticSpec {
  CriticMode mode = CriticMode::ternary;
  std::size_t k = 1;

  friend bool operator==(const CriticSpec&, const CriticSpec&) = default;
};

inline CriticSpec parse_critic(std::string_view s) {
  if (s == "ternary") return {CriticMode::ternary, 1};
  if (s == "fp32") return {CriticMode::fp32, 1};
  if (s == "ensemble1") return {CriticMode::ensemble, 1};
  if (s == "ensemble3") return {CriticMode::ensemble, 3};
  if (s == "ensemble5") return {CriticMode::ensemble, 5};
  throw Error(ErrorKind::invalid_argument, "unknown critic mode '" + std::string(s) + "'");
}

inline std::string critic_name(const CriticSpec& c) {
  switch (c.mode) {
    case CriticMode::ternary: return "ternary";
    case CriticMode::fp32: return "fp32";
    case CriticMode::ensemble: return "ensemble" + std::to_string(c.k);
  }
  return "?";
}

// Consecutive failed updates after which training aborts as diverged.
inline constexpr std::size_t kMaxFailedUpdates = 20;
inline constexpr double kValueLossCoef = 0.5;

struct TrainConfig {
  double policy_lr = 3e-4;
  double value_lr = 1e-3;
  double clip_epsilon = 0.1;
  double entropy_coef = 0.05;
  double gamma = 0.99;
  double gae_lambda = 0.95;
  std::size_t minibatch = 64;
  std::size_t epochs_per_update = 4;
  std::size_t rollout_length = 2048;
  double grad_clip = 0.5;  // <= 0 disables clipping
  std::size_t total_steps = 500000;
  std::size_t eval_every = 50000;
  std::size_t eval_episodes = 20;
  std::uint64_t seed = 0;
  std::string critic_mode = "ternary";
  // Frozen encoder shape and the seed it is drawn from. The encoder is shared
  // across training seeds, like a pretrained model would be.
  std::size_t backbone_layers = 4;
  std::size_t backbone_dim = 128;
  std::size_t backbone_heads = 4;
  std::size_t backbone_ffn = 256;
  std::uint64_t backbone_seed = 0;

  void validate() const {
    auto req = [](bool ok, const char* what) {
      if (!ok) throw Error(ErrorKind::invalid_argument, std::string("config: ") + what);
    };
    req(policy_lr > 0.0 && std::isfinite(policy_lr), "policy_lr must be > 0");
    req(value_lr > 0.0 && std::isfinite(value_lr), "value_lr must be > 0");
    req(clip_epsilon > 0.0 && clip_epsilon < 1.0, "clip_epsilon must lie in (0, 1)");
    req(entropy_coef >= 0.0 && std::isfinite(entropy_coef), "entropy_coef must be >= 0");
    req(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    req(gae_lambda >= 0.0 && gae_lambda <= 1.0, "gae_lambda must lie in [0, 1]");
    req(minibatch > 0, "minibatch must be > 0");
    req(epochs_per_update > 0, "epochs_per_update must be > 0");
    req(rollout_length > 0, "rollout_length must be > 0");
    req(minibatch <= rollout_length, "minibatch must not exceed rollout_length");
    req(std::isfinite(grad_clip), "grad_clip must be finite");
    req(total_steps > 0, "total_steps must be > 0");
    req(eval_every > 0, "eval_every must be > 0");
    req(eval_episodes > 0, "eval_episodes must be > 0");
    parse_critic(critic_mode);
    backbone().validate();
  }

  BackboneConfig backbone() const {
    BackboneConfig b;
    b.layers = backbone_layers;
    b.model_dim = backbone_dim;
    b.heads = backbone_heads;
    b.ffn_dim = backbone_ffn;
    return b;
  }
};

namespace detail {

struct ConfigField {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline double parse_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw Error(ErrorKind::invalid_argument, "config: bad number for '" + key + "'");
  return out;
}

inline std::uint64_t parse_count(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw Error(ErrorKind::invalid_argument, "config: bad integer for '" + key + "'");
  return out;
}

// Shortest round-trip decimal, independent of locale.
inline std::string format_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

inline const std::vector<ConfigField>& config_fields() {
#define BITRL_REAL(name) \
  {#name, [](TrainConfig& c, const std::string& v) { c.name = parse_real(#name, v); }, \
   [](const TrainConfig& c) { return format_real(c.name); }}
#define BITRL_COUNT(name) \
  {#name, [](TrainConfig& c, const std::string& v) { c.name = static_cast<decltype(c.name)>(parse_count(#name, v)); }, \
   [](const TrainConfig& c) { return std::to_string(c.name); }}
  static const std::vector<ConfigField> fields = {
      BITRL_REAL(policy_lr),
      BITRL_REAL(value_lr),
      BITRL_REAL(clip_epsilon),
      BITRL_REAL(entropy_coef),
      BITRL_REAL(gamma),
      BITRL_REAL(gae_lambda),
      BITRL_COUNT(minibatch),
      BITRL_COUNT(epochs_per_update),
      BITRL_COUNT(rollout_length),
      BITRL_REAL(grad_clip),
      BITRL_COUNT(total_steps),
      BITRL_COUNT(eval_every),
      BITRL_COUNT(eval_episodes),
      BITRL_COUNT(seed),
      {"critic_mode", [](TrainConfig& c, const std::string& v) { c.critic_mode = v; },
       [](const TrainConfig& c) { return c.critic_mode; }},
      BITRL_COUNT(backbone_layers),
      BITRL_COUNT(backbone_dim),
      BITRL_COUNT(backbone_heads),
      BITRL_COUNT(backbone_ffn),
      BITRL_COUNT(backbone_seed),
  };
#undef BITRL_REAL
#undef BITRL_COUNT
  return fields;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

// Flat "key = value" lines; '#' starts a comment. Unknown or repeated keys are
// rejected. Keys not present keep their defaults and are listed in *defaulted.
inline TrainConfig parse_train_config(std::string_view text, std::vector<std::string>* defaulted = nullptr) {
  TrainConfig cfg;
  std::map<std::string, bool> seen;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t nl = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::invalid_argument, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(t).substr(0, eq));
    const std::string value = detail::trim(std::string_view(t).substr(eq + 1));
    const auto& fields = detail::config_fields();
    auto it = std::find_if(fields.begin(), fields.end(), [&](const auto& f) { return key == f.key; });
    if (it == fields.end()) throw Error(ErrorKind::invalid_argument, "config: unknown key '" + key + "'");
    if (seen[key]) throw Error(ErrorKind::invalid_argument, "config: duplicate key '" + key + "'");
    seen[key] = true;
    it->set(cfg, value);
  }
  if (defaulted) {
    defaulted->clear();
    for (const auto& f : detail::config_fields()) {
      if (!seen[f.key]) defaulted->push_back(f.key);
    }
  }
  cfg.validate();
  return cfg;
}

// Canonical text form; parse_train_config(to_text(c)) == c.
inline std::string to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& f : detail::config_fields()) out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  return out;
}

inline TrainConfig load_train_config(const std::string& path, std::vector<std::string>* defaulted = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), defaulted);
}

// ---------------------------------------------------------------------------
// Latent computation with memoization. encode() is a pure function of the
// token sequence, so caching never changes results.

template <class Linear>
class LatentCache {
 public:
  explicit LatentCache(const Encoder<Linear>& model, std::size_t capacity = 1u << 16)
      : model_(&model), capacity_(capacity) {}

  const DenseVector& get(const std::vector<int>& tokens) {
    std::string key(tokens.size() * 2, '\0');
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      key[2 * i] = static_cast<char>(tokens[i] & 0xff);
      key[2 * i + 1] = static_cast<char>((tokens[i] >> 8) & 0xff);
    }
    if (auto it = map_.find(key); it != map_.end()) {
      ++hits_;
      return it->second;
    }
    ++misses_;
    if (map_.size() >= capacity_) map_.clear();
    return map_.emplace(std::move(key), encode(*model_, tokens)).first->second;
  }

  std::size_t hits() const noexcept { return hits_; }
  std::size_t misses() const noexcept { return misses_; }

 private:
  const Encoder<Linear>* model_;
  std::size_t capacity_;
  std::unordered_map<std::string, DenseVector> map_;
  std::size_t hits_ = 0, misses_ = 0;
};

// ---------------------------------------------------------------------------
// Critic.

struct CriticEnsemble {
  CriticSpec spec;
  std::vector<HeadParams> members;
  std::vector<AdamState> optim;

  bool reads_shadow() const noexcept { return spec.mode == CriticMode::fp32; }
  std::size_t k() const noexcept { return members.size(); }
};

// Members are drawn one after another from rng, so a k = 1 critic equals the
// first member of a larger ensemble drawn from the same stream.
inline CriticEnsemble make_critic(const CriticSpec& spec, std::size_t latent_dim, RngStream& rng,
                                  bool shadow_available) {
  if (spec.k != 1 && spec.k != 3 && spec.k != 5) throw Error(ErrorKind::invalid_argument, "critic: k must be 1, 3 or 5");
  if (spec.mode != CriticMode::ensemble && spec.k != 1) {
    throw Error(ErrorKind::invalid_argument, "critic: only ensemble mode takes k > 1");
  }
  if (spec.mode == CriticMode::fp32 && !shadow_available) {
    throw Error(ErrorKind::invalid_argument, "critic: fp32 mode needs the full-precision shadow backbone");
  }
  CriticEnsemble c;
  c.spec = spec;
  for (std::size_t i = 0; i < spec.k; ++i) {
    c.members.push_back(make_value_head(latent_dim, rng));
    c.optim.push_back(AdamState::for_params(c.members.back()));
  }
  return c;
}

// Mean of member predictions for each row of latents.
inline DenseVector critic_predict(const CriticEnsemble& c, const DenseMatrix& latents) {
  DenseVector out(latents.rows(), 0.0);
  for (const auto& m : c.members) {
    const DenseMatrix v = head_forward(m, latents);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += v(i, 0);
  }
  for (double& v : out) v /= static_cast<double>(c.members.size());
  return out;
}

inline double critic_predict(const CriticEnsemble& c, std::span<const double> latent) {
  return critic_predict(c, as_row(latent))[0];
}

// ---------------------------------------------------------------------------
// Rollouts and GAE.

struct RolloutBuffer {
  std::vector<DenseVector> obs;
  DenseMatrix latents;         // policy pathway
  DenseMatrix critic_latents;  // equals latents unless the critic reads the shadow
  std::vector<std::size_t> actions;
  DenseVector log_probs, rewards, values;
  std::vector<std::uint8_t> dones;      // episode ended after this step (terminal or truncated)
  std::vector<std::uint8_t> truncated;  // ended by the step cap
  double bootstrap_value = 0.0;         // V of the state following the last step; 0 if it ended
  DenseVector advantages, returns;
  std::vector<double> episode_returns;  // episodes completed during this rollout

  std::size_t size() const noexcept { return actions.size(); }
};

// The pieces of an agent a rollout needs. Pointers are non-owning.
struct AgentView {
  EnvId env;
  const BackboneModel* model;
  const ShadowBackbone* shadow;  // may be null unless the critic reads it
  const HeadParams* policy;
  const CriticEnsemble* critic;
};

// Episode bookkeeping that persists across rollouts.
struct EnvCursor {
  EnvState state;
  double episode_return = 0.0;
};

struct RolloutRngs {
  RngStream env;
  RngStream action;
};

inline std::vector<int> state_tokens(const Vocabulary& vocab, const EnvState& st) {
  return tokenize(vocab, serialize_state(st.env, st.obs));
}

inline RolloutBuffer collect_rollout(const AgentView& agent, EnvCursor& cur, std::size_t length, RolloutRngs& rngs,
                                     LatentCache<TernaryTensor>& cache, LatentCache<DenseMatrix>* shadow_cache) {
  if (agent.critic->reads_shadow() && !shadow_cache) {
    throw Error(ErrorKind::invalid_argument, "collect_rollout: critic reads the shadow but no shadow cache given");
  }
  const std::size_t d = agent.model->model_dim();
  RolloutBuffer buf;
  buf.latents = DenseMatrix(length, d);
  buf.critic_latents = DenseMatrix(length, d);
  buf.log_probs.reserve(length);
  buf.rewards.reserve(length);
  buf.values.reserve(length);
  auto critic_latent = [&](const std::vector<int>& tokens, const DenseVector& h) -> const DenseVector& {
    return agent.critic->reads_shadow() ? shadow_cache->get(tokens) : h;
  };
  for (std::size_t t = 0; t < length; ++t) {
    const std::vector<int> tokens = state_tokens(agent.model->vocab(), cur.state);
    const DenseVector& h = cache.get(tokens);
    const DenseVector& hc = critic_latent(tokens, h);
    std::copy(h.begin(), h.end(), buf.latents.row(t).begin());
    std::copy(hc.begin(), hc.end(), buf.critic_latents.row(t).begin());
    const DenseVector logits = policy_logits(*agent.policy, h);
    const DenseVector logp = log_softmax(logits);
    const DenseVector probs = softmax(logits);
    const std::size_t a = rngs.action.categorical(probs);
    const double v = critic_predict(*agent.critic, hc);

    buf.obs.push_back(cur.state.obs);
    StepResult r;
    try {
      r = step(cur.state, a, rngs.env);
    } catch (const Error& e) {
      throw Error(e.kind(), std::string(e.what()) + " (rollout step " + std::to_string(t) + ")");
    }
    buf.actions.push_back(a);
    buf.log_probs.push_back(logp[a]);
    buf.rewards.push_back(r.reward);
    buf.values.push_back(v);
    const bool ended = r.done || r.truncated;
    buf.dones.push_back(ended ? 1 : 0);
    buf.truncated.push_back(r.truncated ? 1 : 0);
    cur.episode_return += r.reward;
    if (ended) {
      buf.episode_returns.push_back(cur.episode_return);
      cur.episode_return = 0.0;
      cur.state = reset(agent.env, rngs.env);
    }
  }
  if (buf.dones.back()) {
    buf.bootstrap_value = 0.0;
  } else {
    const std::vector<int> tokens = state_tokens(agent.model->vocab(), cur.state);
    const DenseVector& h = cache.get(tokens);
    buf.bootstrap_value = critic_predict(*agent.critic, critic_latent(tokens, h));
  }
  return buf;
}

// delta_t = r_t + gamma V(s_{t+1}) (1 - done_t) - V(s_t)
// A_t     = delta_t + gamma lambda (1 - done_t) A_{t+1}
// Returns are A_t + V(s_t) before advantages are normalized.
inline void compute_gae(RolloutBuffer& buf, double gamma, double lambda, bool normalize = true) {
  const std::size_t n = buf.size();
  buf.advantages.assign(n, 0.0);
  buf.returns.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t t = n; t-- > 0;) {
    const double mask = buf.dones[t] ? 0.0 : 1.0;
    const double next_value = t + 1 < n ? buf.values[t + 1] : buf.bootstrap_value;
    const double delta = buf.rewards[t] + gamma * next_value * mask - buf.values[t];
    next_adv = delta + gamma * lambda * mask * next_adv;
    buf.advantages[t] = next_adv;
    buf.returns[t] = next_adv + buf.values[t];
  }
  if (normalize && n > 0) {
    const double mu = mean(buf.advantages);
    double var = 0.0;
    for (double a : buf.advantages) var += (a - mu) * (a - mu);
    const double sd = std::max(std::sqrt(var / static_cast<double>(n)), 1e-8);
    for (double& a : buf.advantages) a = (a - mu) / sd;
  }
}

// ---------------------------------------------------------------------------
// Losses.

struct PolicyBatchResult {
  double loss = 0.0;  // surrogate loss minus the entropy bonus
  double surrogate = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double max_ratio_deviation = 0.0;  // max |r - 1|
  HeadGradients grads;
};

// loss = mean_i[-min(r_i A_i, clip(r_i, 1-eps, 1+eps) A_i)] - beta mean_i H_i
// with r_i = exp(log pi(a_i | h_i) - old_log_prob_i).
inline PolicyBatchResult policy_loss_grad(const HeadParams& pi, const DenseMatrix& latents,
                                          std::span<const std::size_t> actions, std::span<const double> adv,
                                          std::span<const double> old_logp, double eps, double beta) {
  const std::size_t n = latents.rows();
  if (n == 0) throw Error(ErrorKind::invalid_argument, "policy loss: empty batch");
  if (actions.size() != n || adv.size() != n || old_logp.size() != n) {
    throw Error(ErrorKind::dimension_mismatch, "policy loss: batch length mismatch");
  }
  HeadCache cache;
  const DenseMatrix logits = head_forward(pi, latents, &cache);
  const std::size_t na = logits.cols();
  DenseMatrix d_logits(n, na);
  PolicyBatchResult res;
  const double inv_n = 1.0 / static_cast<double>(n);
  std::size_t clipped = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const DenseVector logp = log_softmax(logits.row(i));
    DenseVector p(na);
    for (std::size_t j = 0; j < na; ++j) p[j] = std::exp(logp[j]);
    double h = 0.0;
    for (std::size_t j = 0; j < na; ++j) h -= p[j] * logp[j];
    const std::size_t a = actions[i];
    if (a >= na) throw Error(ErrorKind::invalid_argument, "policy loss: action out of range");
    const double log_ratio = logp[a] - old_logp[i];
    const double r = std::exp(log_ratio);
    const double unclipped = r * adv[i];
    const double clipped_term = std::clamp(r, 1.0 - eps, 1.0 + eps) * adv[i];
    const double surr = std::min(unclipped, clipped_term);
    res.surrogate -= surr * inv_n;
    res.entropy += h * inv_n;
    res.approx_kl += ((r - 1.0) - log_ratio) * inv_n;
    res.max_ratio_deviation = std::max(res.max_ratio_deviation, std::abs(r - 1.0));
    if (std::abs(r - 1.0) > eps) ++clipped;
    // d(-surr)/dlogits flows only when the unclipped term is the minimum.
    const double g_logp = unclipped <= clipped_term ? -unclipped : 0.0;
    auto dz = d_logits.row(i);
    for (std::size_t j = 0; j < na; ++j) {
      const double dlogp = (j == a ? 1.0 : 0.0) - p[j];
      // d(-beta H)/dz_j = beta p_j (log p_j + H)
      dz[j] = (g_logp * dlogp + beta * p[j] * (logp[j] + h)) * inv_n;
    }
  }
  res.loss = res.surrogate - beta * res.entropy;
  res.clip_fraction = static_cast<double>(clipped) * inv_n;
  res.grads = backward(pi, cache, d_logits);
  return res;
}

struct ValueBatchResult {
  double loss = 0.0;  // 0.5 * mean (V - R)^2
  DenseVector predictions;
  HeadGradients grads;
};

inline ValueBatchResult value_loss_grad(const HeadParams& v, const DenseMatrix& latents, std::span<const double> returns) {
  const std::size_t n = latents.rows();
  if (n == 0) throw Error(ErrorKind::invalid_argument, "value loss: empty batch");
  if (returns.size() != n) throw Error(ErrorKind::dimension_mismatch, "value loss: batch length mismatch");
  HeadCache cache;
  const DenseMatrix pred = head_forward(v, latents, &cache);
  DenseMatrix d(n, 1);
  ValueBatchResult res;
  res.predictions.resize(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = pred(i, 0) - returns[i];
    res.predictions[i] = pred(i, 0);
    res.loss += kValueLossCoef * e * e * inv_n;
    d(i, 0) = 2.0 * kValueLossCoef * e * inv_n;
  }
  res.grads = backward(v, cache, d);
  return res;
}

// ---------------------------------------------------------------------------
// Update.

struct UpdateMetrics {
  std::size_t step = 0;
  std::optional<double> mean_return;
  double entropy = 0.0;
  double value_loss = 0.0;
  double grad_norm = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  bool failed = false;
  // Not part of the metrics line: max |r - 1| on the first minibatch.
  double first_ratio_deviation = 0.0;
};

inline nlohmann::ordered_json to_json(const UpdateMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  if (m.mean_return) j["mean_return"] = *m.mean_return;
  else j["mean_return"] = nullptr;
  j["entropy"] = m.entropy;
  j["value_loss"] = m.value_loss;
  j["grad_norm"] = m.grad_norm;
  j["approx_kl"] = m.approx_kl;
  j["clip_fraction"] = m.clip_fraction;
  j["failed"] = m.failed;
  return j;
}

inline UpdateMetrics metrics_from_json(const nlohmann::json& j) {
  UpdateMetrics m;
  m.step = j.at("step").get<std::size_t>();
  if (!j.at("mean_return").is_null()) m.mean_return = j.at("mean_return").get<double>();
  m.entropy = j.at("entropy").get<double>();
  m.value_loss = j.at("value_loss").get<double>();
  m.grad_norm = j.at("grad_norm").get<double>();
  m.approx_kl = j.at("approx_kl").get<double>();
  m.clip_fraction = j.at("clip_fraction").get<double>();
  m.failed = j.at("failed").get<bool>();
  return m;
}

struct TrainableHeads {
  HeadParams policy;
  AdamState policy_opt;
  CriticEnsemble critic;
};

namespace detail {

inline DenseMatrix gather_rows(const DenseMatrix& m, std::span<const std::size_t> idx) {
  DenseMatrix out(idx.size(), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto src = m.row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

template <class T>
std::vector<T> gather(const std::vector<T>& v, std::span<const std::size_t> idx) {
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = v[idx[i]];
  return out;
}

}  // namespace detail

// epochs x shuffled minibatches of the clipped surrogate, entropy bonus and
// value regression. Policy and critic have separate Adam states and learning
// rates; each ensemble member regresses the targets on its own. Metrics are
// averaged over the minibatches of the final epoch.
inline UpdateMetrics ppo_update(const RolloutBuffer& buf, TrainableHeads& heads, const TrainConfig& cfg,
                                RngStream& rng) {
  const std::size_t n = buf.size();
  if (buf.advantages.size() != n || buf.returns.size() != n) {
    throw Error(ErrorKind::invalid_argument, "ppo_update: advantages not computed");
  }
  UpdateMetrics m;
  std::vector<std::size_t> order(n);
  bool first = true;
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_update; ++epoch) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    const bool last_epoch = epoch + 1 == cfg.epochs_per_update;
    double ent = 0.0, vloss = 0.0, gnorm = 0.0, kl = 0.0, clipf = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.minibatch) {
      const std::size_t len = std::min(cfg.minibatch, n - start);
      const std::span<const std::size_t> idx(order.data() + start, len);
      const DenseMatrix lat = detail::gather_rows(buf.latents, idx);
      const std::vector<std::size_t> acts = detail::gather(buf.actions, idx);
      const DenseVector adv = detail::gather(buf.advantages, idx);
      const DenseVector old = detail::gather(buf.log_probs, idx);
      const DenseVector ret = detail::gather(buf.returns, idx);

      PolicyBatchResult pr = policy_loss_grad(heads.policy, lat, acts, adv, old, cfg.clip_epsilon, cfg.entropy_coef);
      if (first) {
        m.first_ratio_deviation = pr.max_ratio_deviation;
        first = false;
      }
      const DenseMatrix clat =
          heads.critic.reads_shadow() ? detail::gather_rows(buf.critic_latents, idx) : lat;
      std::vector<ValueBatchResult> vr;
      double critic_loss = 0.0;
      double sq = pr.grads.sum_of_squares();
      for (const auto& member : heads.critic.members) {
        vr.push_back(value_loss_grad(member, clat, ret));
        critic_loss += vr.back().loss / static_cast<double>(heads.critic.k());
        sq += vr.back().grads.sum_of_squares();
      }
      const double total_norm = std::sqrt(sq);
      if (!std::isfinite(pr.loss) || !std::isfinite(critic_loss) || !std::isfinite(total_norm)) {
        m.failed = true;  // skip this minibatch entirely
        continue;
      }
      const UpdateOutcome po =
          apply_update(heads.policy, std::move(pr.grads), heads.policy_opt, cfg.policy_lr, cfg.grad_clip);
      bool ok = po.applied;
      for (std::size_t k = 0; k < heads.critic.k(); ++k) {
        ok = apply_update(heads.critic.members[k], std::move(vr[k].grads), heads.critic.optim[k], cfg.value_lr,
                          cfg.grad_clip)
                 .applied &&
             ok;
      }
      if (!ok) m.failed = true;
      if (last_epoch) {
        // Reported value loss uses the ensemble prediction.
        double ens_loss = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          double pred = 0.0;
          for (const auto& r : vr) pred += r.predictions[i];
          pred /= static_cast<double>(vr.size());
          ens_loss += kValueLossCoef * (pred - ret[i]) * (pred - ret[i]);
        }
        ent += pr.entropy;
        vloss += ens_loss / static_cast<double>(len);
        gnorm += total_norm;
        kl += pr.approx_kl;
        clipf += pr.clip_fraction;
        ++batches;
      }
    }
    if (last_epoch && batches > 0) {
      const double b = static_cast<double>(batches);
      m.entropy = ent / b;
      m.value_loss = vloss / b;
      m.grad_norm = gnorm / b;
      m.approx_kl = kl / b;
      m.clip_fraction = clipf / b;
    }
  }
  if (!buf.episode_returns.empty()) m.mean_return = mean(buf.episode_returns);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  std::size_t step = 0;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> returns;
};

inline nlohmann::ordered_json to_json(const EvalResult& e) {
  nlohmann::ordered_json j;
  j["step"] = e.step;
  j["mean_return"] = e.mean;
  j["std_return"] = e.std;
  j["returns"] = e.returns;
  return j;
}

// Population standard deviation.
inline double stddev(std::span<const double> v) {
  if (v.empty()) return 0.0;
  const double mu = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size()));
}

// Most probable action; exact ties are broken uniformly with rng, so a policy
// with identical logits behaves like a uniform random policy.
inline std::size_t greedy_action(std::span<const double> logits, RngStream& rng) {
  const double best = *std::max_element(logits.begin(), logits.end());
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] == best) ties.push_back(i);
  }
  return ties.size() == 1 ? ties[0] : ties[rng.below(ties.size())];
}

inline EvalResult evaluate_policy(const BackboneModel& model, const HeadParams& policy, EnvId env,
                                  std::size_t episodes, RngStream& rng, LatentCache<TernaryTensor>* cache = nullptr) {
  if (episodes == 0) throw Error(ErrorKind::invalid_argument, "evaluate: episodes must be > 0");
  if (policy.output_dim() != action_count(env)) {
    throw Error(ErrorKind::invalid_argument, "evaluate: policy action count does not match the environment");
  }
  LatentCache<TernaryTensor> local(model);
  LatentCache<TernaryTensor>& c = cache ? *cache : local;
  EvalResult res;
  for (std::size_t e = 0; e < episodes; ++e) {
    EnvState st = reset(env, rng);
    double ret = 0.0;
    while (!st.done) {
      const DenseVector& h = c.get(state_tokens(model.vocab(), st));
      const std::size_t a = greedy_action(policy_logits(policy, h), rng);
      ret += step(st, a, rng).reward;
    }
    res.returns.push_back(ret);
  }
  res.mean = mean(res.returns);
  res.std = stddev(res.returns);
  return res;
}

// ---------------------------------------------------------------------------
// Agent checkpoints.

inline Checkpoint agent_checkpoint(const BackboneModel& model, EnvId env, const TrainableHeads& heads,
                                   const TrainConfig& cfg) {
  Checkpoint c = backbone_checkpoint(model);
  c.meta["agent.env"] = std::string(env_name(env));
  c.meta["agent.critic_mode"] = critic_name(heads.critic.spec);
  c.meta["agent.seed"] = std::to_string(cfg.seed);
  put_head(c, "policy", heads.policy);
  for (std::size_t k = 0; k < heads.critic.k(); ++k) put_head(c, "value." + std::to_string(k), heads.critic.members[k]);
  return c;
}

struct LoadedAgent {
  BackboneModel model;
  HeadParams policy;
  EnvId env;
};

inline LoadedAgent load_agent(const Checkpoint& c) {
  const auto it = c.meta.find("agent.env");
  if (it == c.meta.end()) throw Error(ErrorKind::format, "checkpoint holds no trained agent");
  LoadedAgent a{load_backbone(c), get_head(c, "policy"), parse_env_id(it->second)};
  if (a.policy.input_dim() != a.model.model_dim() || a.policy.output_dim() != action_count(a.env)) {
    throw Error(ErrorKind::format, "checkpoint: policy head does not match backbone or environment");
  }
  return a;
}

inline EvalResult evaluate(const Checkpoint& c, EnvId env, std::size_t episodes, RngStream& rng) {
  LoadedAgent a = load_agent(c);
  if (a.env != env) {
    throw Error(ErrorKind::invalid_argument, "checkpoint was trained on " + std::string(env_name(a.env)) +
                                                 ", not " + std::string(env_name(env)));
  }
  return evaluate_policy(a.model, a.policy, env, episodes, rng);
}

// FNV-1a over the serialized backbone; used to show it never changes.
inline std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t backbone_checksum(const BackboneModel& m) { return fnv1a(serialize_checkpoint(backbone_checkpoint(m))); }

// ---------------------------------------------------------------------------
// Training loop.

enum class RunStatus { completed, diverged };

struct TrainResult {
  RunStatus status = RunStatus::completed;
  std::vector<UpdateMetrics> updates;
  std::vector<EvalResult> evals;
  Checkpoint checkpoint;
  std::uint64_t backbone_checksum_before = 0;
  std::uint64_t backbone_checksum_after = 0;
  std::size_t cache_hits = 0, cache_misses = 0;

  double best_eval() const {
    double b = -std::numeric_limits<double>::infinity();
    for (const auto& e : evals) b = std::max(b, e.mean);
    return b;
  }
  double final_eval() const { return evals.empty() ? std::numeric_limits<double>::quiet_NaN() : evals.back().mean; }
};

// Normalized final score below 10% of the attainable range, or divergence.
inline bool run_failed(const TrainResult& r, EnvId env) {
  if (r.status == RunStatus::diverged) return true;
  const ReturnRange range = return_range(env);
  const double score = (r.final_eval() - range.worst) / (range.best - range.worst);
  return !(score >= 0.1);
}

// RNG stream ids derived from the training seed.
inline constexpr std::uint64_t kStreamHeads = 1;
inline constexpr std::uint64_t kStreamEnv = 2;
inline constexpr std::uint64_t kStreamAction = 3;
inline constexpr std::uint64_t kStreamShuffle = 4;
inline constexpr std::uint64_t kStreamEval = 5;

struct TrainHooks {
  std::function<void(const UpdateMetrics&)> on_update;
  std::function<void(const EvalResult&)> on_eval;
};

inline TrainableHeads init_heads(const TrainConfig& cfg, EnvId env, bool shadow_available) {
  RngStream rng(cfg.seed, kStreamHeads);
  TrainableHeads h;
  h.policy = make_policy_head(cfg.backbone_dim, action_count(env), rng);
  h.policy_opt = AdamState::for_params(h.policy);
  h.critic = make_critic(parse_critic(cfg.critic_mode), cfg.backbone_dim, rng, shadow_available);
  return h;
}

// Alternates rollout / GAE / update until total_steps. Evaluates the greedy
// policy whenever another eval_every steps have passed and after the final
// update. Aborts as diverged after kMaxFailedUpdates consecutive failed updates.
inline TrainResult train_with(EnvId env, const TrainConfig& cfg, const BackbonePair& backbone,
                              const TrainHooks& hooks = {}) {
  cfg.validate();
  if (!(backbone.model.config() == cfg.backbone())) {
    throw Error(ErrorKind::invalid_argument, "train: backbone shape does not match the config");
  }
  TrainResult res;
  res.backbone_checksum_before = backbone_checksum(backbone.model);
  TrainableHeads heads = init_heads(cfg, env, true);

  RolloutRngs rngs{RngStream(cfg.seed, kStreamEnv), RngStream(cfg.seed, kStreamAction)};
  RngStream shuffle_rng(cfg.seed, kStreamShuffle);
  RngStream eval_rng(cfg.seed, kStreamEval);
  LatentCache<TernaryTensor> cache(backbone.model);
  std::optional<LatentCache<DenseMatrix>> shadow_cache;
  if (heads.critic.reads_shadow()) shadow_cache.emplace(backbone.shadow);

  EnvCursor cur{reset(env, rngs.env), 0.0};
  std::size_t steps = 0;
  std::size_t consecutive_failed = 0;
  std::size_t next_eval = cfg.eval_every;
  auto run_eval = [&] {
    EvalResult e = evaluate_policy(backbone.model, heads.policy, env, cfg.eval_episodes, eval_rng, &cache);
    e.step = steps;
    if (hooks.on_eval) hooks.on_eval(e);
    res.evals.push_back(std::move(e));
  };
  while (steps < cfg.total_steps) {
    const std::size_t len = std::min(cfg.rollout_length, cfg.total_steps - steps);
    const AgentView view{env, &backbone.model, &backbone.shadow, &heads.policy, &heads.critic};
    RolloutBuffer buf =
        collect_rollout(view, cur, len, rngs, cache, shadow_cache ? &*shadow_cache : nullptr);
    steps += len;
    compute_gae(buf, cfg.gamma, cfg.gae_lambda);
    UpdateMetrics m = ppo_update(buf, heads, cfg, shuffle_rng);
    m.step = steps;
    if (hooks.on_update) hooks.on_update(m);
    res.updates.push_back(m);
    consecutive_failed = m.failed ? consecutive_failed + 1 : 0;
    if (consecutive_failed >= kMaxFailedUpdates) {
      res.status = RunStatus::diverged;
      break;
    }
    if (steps >= next_eval || steps >= cfg.total_steps) {
      run_eval();
      while (next_eval <= steps) next_eval += cfg.eval_every;
    }
  }
  res.checkpoint = agent_checkpoint(backbone.model, env, heads, cfg);
  res.backbone_checksum_after = backbone_checksum(backbone.model);
  res.cache_hits = cache.hits();
  res.cache_misses = cache.misses();
  return res;
}

inline BackbonePair backbone_for(const TrainConfig& cfg) {
  RngStream rng(cfg.backbone_seed, 0);
  return build_backbone(cfg.backbone(), rng);
}

inline TrainResult train(EnvId env, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  return train_with(env, cfg, backbone_for(cfg), hooks);
}

// metrics.jsonl, evals.jsonl and checkpoint.btrl under dir.
inline void write_run(const TrainResult& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream metrics(dir + "/metrics.jsonl", std::ios::trunc);
  for (const auto& m : r.updates) metrics << to_json(m).dump() << '\n';
  std::ofstream evals(dir + "/evals.jsonl", std::ios::trunc);
  for (const auto& e : r.evals) evals << to_json(e).dump() << '\n';
  if (!metrics || !evals) throw Error(ErrorKind::io, "cannot write run files under '" + dir + "'");
  save_checkpoint(r.checkpoint, dir + "/checkpoint.btrl");
}

}  // namespace bitrl
