// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <string>

#include "mtla/common.hpp"

namespace mtla {

enum class Variant { kMha, kMqa, kGqa, kMla, kMtla };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kMha: return "mha";
    case Variant::kMqa: return "mqa";
    case Variant::kGqa: return "gqa";
    case Variant::kMla: return "mla";
    case Variant::kMtla: return "mtla";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "mha") return Variant::kMha;
  if (s == "mqa") return Variant::kMqa;
  if (s == "gqa") return Variant::kGqa;
  if (s == "mla") return Variant::kMla;
  if (s == "mtla") return Variant::kMtla;
  throw ConfigError("unknown attention variant: " + s);
}

/// Dimensional hyper-parameters shared by every attention variant.
///   d       model dimension (= n_h * d_h)
///   n_h     query head count
///   d_h     per-head dimension
///   g       GQA group count (kv heads)
///   r       latent dimension (default 4*d_h)
///   d_h_rope  decoupled-RoPE per-head dimension (default d_h/2)
///   s       temporal compression ratio
///   layers  layer count, used only for cache accounting
struct AttentionConfig {
  index_t d = 512;
  index_t n_h = 8;
  index_t d_h = 64;
  index_t g = 8;
  index_t r = 256;
  index_t d_h_rope = 32;
  index_t s = 2;
  index_t layers = 1;
  index_t d_hyper = 64;

  void validate() const {
    if (d < 1 || n_h < 1 || d_h < 1) throw ConfigError("config: d, n_h, d_h must be >= 1");
    if (d != n_h * d_h) throw ConfigError("config: d must equal n_h * d_h");
    if (g < 1 || g > n_h || n_h % g != 0)
      throw ConfigError("config: need 1 <= g <= n_h and n_h % g == 0");
    if (r < 1 || r > d) throw ConfigError("config: need 1 <= r <= d");
    if (s < 1) throw ConfigError("config: s must be >= 1");
    if (d_h_rope < 2 || d_h_rope % 2 != 0)
      throw ConfigError("config: d_h_rope must be even and >= 2");
    if (r % 2 != 0) throw ConfigError("config: r must be even (positional embedding)");
    if (layers < 1) throw ConfigError("config: layers must be >= 1");
    if (d_hyper < 1) throw ConfigError("config: d_hyper must be >= 1");
  }

  /// Derived defaults from d and n_h: r = 4*d_h, d_h^R = d_h/2.
  static AttentionConfig make(index_t d, index_t n_h, index_t s = 2, index_t layers = 1,
                              index_t g = 0) {
    AttentionConfig c;
    c.d = d;
    c.n_h = n_h;
    c.d_h = d / n_h;
    c.g = g == 0 ? n_h : g;
    c.r = std::min(4 * c.d_h, d);
    c.d_h_rope = c.d_h / 2 >= 2 ? c.d_h / 2 : 2;
    c.s = s;
    c.layers = layers;
    c.validate();
    return c;
  }
};

/// Average KV-cache elements per generated token, the closed forms the
/// cache-size comparisons rest on. MTLA amortizes the latent row over s
/// steps, so its figure is MLA's divided by s.
inline double cache_elements_per_token(const AttentionConfig& c, Variant v) {
  const double l = static_cast<double>(c.layers);
  switch (v) {
    case Variant::kMha: return 2.0 * c.d_h * c.n_h * l;
    case Variant::kMqa: return 2.0 * c.d_h * l;
    case Variant::kGqa: return 2.0 * c.g * c.d_h * l;
    case Variant::kMla: return static_cast<double>(c.r + c.d_h_rope) * l;
    case Variant::kMtla:
      return static_cast<double>(c.r + c.d_h_rope) * l / static_cast<double>(c.s);
  }
  throw ConfigError("cache_elements_per_token: unknown variant");
}

/// Exact cache element count after decoding `steps` tokens (integer;
/// MTLA's row count is ceil(steps/s)).
inline index_t cache_elements_total(const AttentionConfig& c, Variant v, index_t steps) {
  switch (v) {
    case Variant::kMha: return 2 * c.d_h * c.n_h * c.layers * steps;
    case Variant::kMqa: return 2 * c.d_h * c.layers * steps;
    case Variant::kGqa: return 2 * c.g * c.d_h * c.layers * steps;
    case Variant::kMla: return (c.r + c.d_h_rope) * c.layers * steps;
    case Variant::kMtla:
      return (c.r + c.d_h_rope) * c.layers * ((steps + c.s - 1) / c.s);
  }
  throw ConfigError("cache_elements_total: unknown variant");
}

}  // namespace mtla
