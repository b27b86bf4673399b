#pragma once

// State serialization and the word-level tokenizer feeding the backbone.
//
// Observations are rendered into fixed sentence templates with two-decimal
// fixed-point numbers. The tokenizer splits on whitespace; numeric literals
// become a sign token followed by one token per character ("0".."9", ".").

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bitrl/env_id.hpp"
#include "bitrl/error.hpp"
#include "bitrl/tensor.hpp"

namespace bitrl {

inline constexpr std::size_t kMaxContext = 64;

struct TemplateSlot {
  std::string label;       // words emitted before the value
  std::size_t obs_index;   // which observation dimension fills this slot
  double scale = 1.0;      // value is multiplied by this before rendering
};

struct SerializationTemplate {
  std::string env;
  std::vector<TemplateSlot> slots;
};

inline SerializationTemplate serialization_template(EnvId id) {
  switch (id) {
    case EnvId::cartpole:
      return {"cartpole",
              {{"cart position", 0}, {"velocity", 1}, {"pole angle", 2}, {"angular velocity", 3}}};
    case EnvId::mountaincar:
      // Velocity lives in [-0.07, 0.07]; render it in hundredths so two decimals
      // keep useful resolution.
      return {"mountaincar", {{"car position", 0}, {"velocity in hundredths", 1, 100.0}}};
    case EnvId::acrobot:
      return {"acrobot",
              {{"first link cosine", 0},
               {"sine", 1},
               {"second link cosine", 2},
               {"sine", 3},
               {"first joint speed", 4},
               {"second joint speed", 5}}};
    case EnvId::textgrid:
      return {"textgrid",
              {{"go to the red cell at row", 2}, {"column", 3}, {"agent at row", 0}, {"column", 1}}};
  }
  throw Error(ErrorKind::invalid_argument, "no template for environment");
}

// Template for arbitrary-dimension states: "state v0 v1 ...".
inline SerializationTemplate generic_template(std::size_t dims) {
  SerializationTemplate t{"generic", {}};
  for (std::size_t i = 0; i < dims; ++i) t.slots.push_back({i == 0 ? "state" : "", i});
  return t;
}

// Two-decimal fixed point, rounding half away from zero, never "-0.00".
inline std::string format_fixed2(double v) {
  if (!std::isfinite(v)) throw Error(ErrorKind::invalid_argument, "serialize: non-finite value");
  const long long hundredths = std::llround(v * 100.0);
  const unsigned long long mag = static_cast<unsigned long long>(hundredths < 0 ? -hundredths : hundredths);
  std::string out;
  if (hundredths < 0) out.push_back('-');
  out += std::to_string(mag / 100);
  out.push_back('.');
  const unsigned long long frac = mag % 100;
  out.push_back(static_cast<char>('0' + frac / 10));
  out.push_back(static_cast<char>('0' + frac % 10));
  return out;
}

inline std::string serialize_with(const SerializationTemplate& tmpl, std::span<const double> obs) {
  if (tmpl.slots.size() != obs.size()) {
    throw Error(ErrorKind::dimension_mismatch, "serialize: observation dimension does not match template '" + tmpl.env + "'");
  }
  std::string text;
  for (const auto& slot : tmpl.slots) {
    if (!slot.label.empty()) {
      if (!text.empty()) text.push_back(' ');
      text += slot.label;
    }
    if (!text.empty()) text.push_back(' ');
    text += format_fixed2(obs[slot.obs_index] * slot.scale);
  }
  return text;
}

inline std::string serialize_state(EnvId id, std::span<const double> obs) {
  return serialize_with(serialization_template(id), obs);
}

// Accepts the environment names plus "generic".
inline std::string serialize_state(std::string_view env, std::span<const double> obs) {
  if (env == "generic") return serialize_with(generic_template(obs.size()), obs);
  return serialize_state(parse_env_id(env), obs);
}

// ---------------------------------------------------------------------------

inline bool is_numeric_literal(std::string_view w) {
  std::size_t i = 0;
  if (i < w.size() && (w[i] == '+' || w[i] == '-')) ++i;
  const std::size_t int_start = i;
  while (i < w.size() && w[i] >= '0' && w[i] <= '9') ++i;
  if (i == int_start) return false;
  if (i == w.size()) return true;
  if (w[i] != '.') return false;
  ++i;
  const std::size_t frac_start = i;
  while (i < w.size() && w[i] >= '0' && w[i] <= '9') ++i;
  return i == w.size() && i > frac_start;
}

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnknown = 1;

  Vocabulary() = default;

  // Rebuilds from a serialized token list; entries 0 and 1 must be the specials.
  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2 || tokens_[0] != "<pad>" || tokens_[1] != "<unk>") {
      throw Error(ErrorKind::format, "vocabulary: missing special tokens");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
        throw Error(ErrorKind::format, "vocabulary: duplicate token '" + tokens_[i] + "'");
      }
    }
  }

  // Specials, sign/digit tokens, then every template word in sorted order.
  static Vocabulary standard() {
    std::vector<std::string> tokens = {"<pad>", "<unk>", "+", "-", "."};
    for (char c = '0'; c <= '9'; ++c) tokens.emplace_back(1, c);
    std::vector<std::string> words;
    auto add_words = [&](const std::string& text) {
      std::istringstream in(text);
      std::string w;
      while (in >> w) words.push_back(w);
    };
    for (EnvId id : kAllEnvs) {
      for (const auto& slot : serialization_template(id).slots) add_words(slot.label);
    }
    add_words("state");
    std::sort(words.begin(), words.end());
    words.erase(std::unique(words.begin(), words.end()), words.end());
    for (auto& w : words) tokens.push_back(std::move(w));
    return Vocabulary(std::move(tokens));
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  int id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnknown : it->second;
  }

  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

// Output is truncated to kMaxContext tokens.
inline std::vector<int> tokenize(const Vocabulary& vocab, std::string_view text) {
  std::vector<int> ids;
  std::size_t i = 0;
  auto push = [&](std::string_view tok) {
    if (ids.size() < kMaxContext) ids.push_back(vocab.id(tok));
  };
  while (i < text.size() && ids.size() < kMaxContext) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == '\n' || text[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < text.size() && !(text[j] == ' ' || text[j] == '\t' || text[j] == '\n' || text[j] == '\r')) ++j;
    if (j == i) break;
    const std::string_view word = text.substr(i, j - i);
    if (is_numeric_literal(word)) {
      std::size_t k = 0;
      if (word[0] == '-') {
        push("-");
        k = 1;
      } else {
        push("+");
        if (word[0] == '+') k = 1;
      }
      for (; k < word.size(); ++k) push(word.substr(k, 1));
    } else {
      push(word);
    }
    i = j;
  }
  return ids;
}

}  // namespace bitrl
