// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint serialization. Layout:
//   magic "MTLA" | version u16 | config record count u32
//   records: u16 name length, name bytes, i64 value
//   parameter count u32
//   per parameter: u16 name length, name bytes, u32 rows, u32 cols,
//                  rows*cols little-endian f64
// Parameters are written in the model's canonical order and always as
// doubles; single-precision models upcast on save. Integers are
// little-endian regardless of host.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mtla/decoder.hpp"

namespace mtla {

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  unsigned char buf[sizeof(U)];
  using Unsigned = std::make_unsigned_t<U>;
  Unsigned u = static_cast<Unsigned>(v);
  for (std::size_t i = 0; i < sizeof(U); ++i)
    buf[i] = static_cast<unsigned char>((u >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

inline void write_f64_le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  write_le(os, bits);
}

template <typename U>
U read_le(std::istream& is, const std::string& what) {
  unsigned char buf[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw IoError("corrupt checkpoint: truncated while reading " + what);
  using Unsigned = std::make_unsigned_t<U>;
  Unsigned u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i)
    u |= static_cast<Unsigned>(buf[i]) << (8 * i);
  return static_cast<U>(u);
}

inline double read_f64_le(std::istream& is, const std::string& what) {
  const std::uint64_t bits = read_le<std::uint64_t>(is, what);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

inline void write_name(std::ostream& os, const std::string& name) {
  write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
}

inline std::string read_name(std::istream& is, const std::string& what) {
  const auto len = read_le<std::uint16_t>(is, what);
  std::string name(len, '\0');
  if (!is.read(name.data(), len))
    throw IoError("corrupt checkpoint: truncated while reading " + what);
  return name;
}

inline std::vector<std::pair<std::string, std::int64_t>> config_records(
    const DecoderConfig& c) {
  return {
      {"vocab", c.vocab},
      {"d", c.d},
      {"n_layers", c.n_layers},
      {"ffn_dim", c.ffn_dim},
      {"max_len", c.max_len},
      {"seed", static_cast<std::int64_t>(c.seed)},
      {"variant", static_cast<std::int64_t>(c.variant)},
      {"attn.n_h", c.attn.n_h},
      {"attn.d_h", c.attn.d_h},
      {"attn.g", c.attn.g},
      {"attn.r", c.attn.r},
      {"attn.d_h_rope", c.attn.d_h_rope},
      {"attn.s", c.attn.s},
      {"attn.layers", c.attn.layers},
      {"attn.d_hyper", c.attn.d_hyper},
  };
}

inline DecoderConfig config_from_records(
    const std::map<std::string, std::int64_t>& rec) {
  DecoderConfig c;
  auto get = [&](const std::string& key) {
    auto it = rec.find(key);
    if (it == rec.end()) throw IoError("corrupt checkpoint: missing config key " + key);
    return it->second;
  };
  c.vocab = get("vocab");
  c.d = get("d");
  c.n_layers = get("n_layers");
  c.ffn_dim = get("ffn_dim");
  c.max_len = get("max_len");
  c.seed = static_cast<std::uint64_t>(get("seed"));
  c.variant = static_cast<Variant>(get("variant"));
  c.attn.d = c.d;
  c.attn.n_h = get("attn.n_h");
  c.attn.d_h = get("attn.d_h");
  c.attn.g = get("attn.g");
  c.attn.r = get("attn.r");
  c.attn.d_h_rope = get("attn.d_h_rope");
  c.attn.s = get("attn.s");
  c.attn.layers = get("attn.layers");
  c.attn.d_hyper = get("attn.d_hyper");
  return c;
}

}  // namespace detail

template <typename T>
void save_checkpoint(Decoder<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("save_checkpoint: cannot open " + path + " for writing");
  os.write("MTLA", 4);
  detail::write_le<std::uint16_t>(os, kCheckpointVersion);
  const auto records = detail::config_records(model.config());
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, value] : records) {
    detail::write_name(os, name);
    detail::write_le<std::int64_t>(os, value);
  }
  auto params = model.named_params();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, m] : params) {
    detail::write_name(os, name);
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m->rows()));
    detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(m->cols()));
    for (index_t i = 0; i < m->size(); ++i)
      detail::write_f64_le(os, static_cast<double>(m->data()[i]));
  }
  os.flush();
  if (!os) throw IoError("save_checkpoint: write failed for " + path);
}

template <typename T>
Decoder<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MTLA", 4) != 0)
    throw IoError("load_checkpoint: bad magic in " + path);
  const auto version = detail::read_le<std::uint16_t>(is, "version");
  if (version != kCheckpointVersion)
    throw IoError("load_checkpoint: unsupported version " + std::to_string(version));
  const auto nrec = detail::read_le<std::uint32_t>(is, "config record count");
  std::map<std::string, std::int64_t> rec;
  for (std::uint32_t i = 0; i < nrec; ++i) {
    std::string name = detail::read_name(is, "config record name");
    rec[name] = detail::read_le<std::int64_t>(is, "config record " + name);
  }
  DecoderConfig cfg = detail::config_from_records(rec);
  Decoder<T> model(cfg);
  auto params = model.named_params();
  const auto nparams = detail::read_le<std::uint32_t>(is, "parameter count");
  if (nparams != params.size())
    throw IoError("load_checkpoint: parameter count mismatch (config expects " +
                  std::to_string(params.size()) + ", file has " + std::to_string(nparams) +
                  ")");
  for (auto& [name, m] : params) {
    const std::string fname = detail::read_name(is, "parameter name");
    if (fname != name)
      throw IoError("corrupt checkpoint: expected block " + name + ", found " + fname);
    const auto rows = detail::read_le<std::uint32_t>(is, name + " rows");
    const auto cols = detail::read_le<std::uint32_t>(is, name + " cols");
    if (static_cast<index_t>(rows) != m->rows() || static_cast<index_t>(cols) != m->cols())
      throw IoError("load_checkpoint: shape mismatch for " + name);
    for (index_t i = 0; i < m->size(); ++i)
      m->data()[i] = static_cast<T>(detail::read_f64_le(is, name + " data"));
  }
  return model;
}

/// Closed-form size in bytes of a checkpoint for this model.
template <typename T>
std::size_t checkpoint_size_bytes(Decoder<T>& model) {
  std::size_t n = 4 + 2 + 4;
  for (const auto& [name, value] : detail::config_records(model.config()))
    n += 2 + name.size() + 8;
  n += 4;
  for (auto& [name, m] : model.named_params())
    n += 2 + name.size() + 4 + 4 + static_cast<std::size_t>(m->size()) * 8;
  return n;
}

// ---------------------------------------------------------------------------
// Line-oriented "key = value" config text
// ---------------------------------------------------------------------------

inline std::string config_to_text(const DecoderConfig& c) {
  std::ostringstream os;
  os << "variant = " << variant_name(c.variant) << "\n";
  for (const auto& [name, value] : detail::config_records(c)) {
    if (name == "variant") continue;
    os << name << " = " << value << "\n";
  }
  return os.str();
}

/// Parses "key = value" lines; blank lines and '#' comments allowed;
/// unknown keys rejected.
inline DecoderConfig config_from_text(const std::string& text) {
  std::map<std::string, std::int64_t> rec;
  auto known = detail::config_records(DecoderConfig{});
  Variant variant = DecoderConfig{}.variant;
  bool saw_variant = false;
  std::istringstream is(text);
  std::string line;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(is, line)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config text: expected key = value: " + t);
    const std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key == "variant") {
      variant = variant_from_name(value);
      saw_variant = true;
      continue;
    }
    bool ok = false;
    for (const auto& [name, unused] : known) ok = ok || name == key;
    if (!ok) throw ConfigError("config text: unknown key " + key);
    try {
      rec[key] = std::stoll(value);
    } catch (const std::exception&) {
      throw ConfigError("config text: bad integer for key " + key + ": " + value);
    }
  }
  for (const auto& [name, value] : known)
    if (rec.find(name) == rec.end()) rec[name] = value;
  DecoderConfig c = detail::config_from_records(rec);
  if (saw_variant) c.variant = variant;
  return c;
}

}  // namespace mtla
