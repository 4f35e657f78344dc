#pragma once

// Files: experiment config (INI-like), the SAGS binary container, SGIM
// grayscale images and CSV reports with a manifest sidecar.
//
// Every writer goes through write_file_atomic (temp file then rename), and
// nothing time- or host-dependent is written, so equal inputs give equal bytes.

#include <algorithm>
#include <bit>
#include <charconv>
#include <complex>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "sagsin/common.hpp"
#include "sagsin/compress.hpp"
#include "sagsin/ddchan.hpp"
#include "sagsin/pipeline.hpp"
#include "sagsin/predict.hpp"
#include "sagsin/semlink.hpp"
#include "sagsin/tokenize.hpp"
#include "sagsin/uwachan.hpp"

namespace sagsin::io {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr const char* kVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Files

inline std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  require(static_cast<bool>(in) || size == 0, ErrorKind::Io, "read failed on '" + path.string() + "'");
  return bytes;
}

inline std::string read_text(const std::filesystem::path& path) {
  const auto b = read_file(path);
  return {reinterpret_cast<const char*>(b.data()), b.size()};
}

/// Writes to a sibling temp file, then renames over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::Io, "cannot create '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(static_cast<bool>(out), ErrorKind::Io, "write failed on '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::Io, "rename to '" + path.string() + "' failed: " + ec.message());
}

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::as_bytes(std::span<const char>(text.data(), text.size())));
}

// ---------------------------------------------------------------------------
// Number formatting (shortest round-trip, locale-free)

inline std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline std::string fmt(std::uint64_t v) { return std::to_string(v); }

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// SAGS container
//
// header   "SAGS" | u16 version | u16 0 | u32 section count | u32 0
// table    per section: name (16 bytes, NUL padded) | u64 offset | u64 length
// payload  per section: dtype tag (4 bytes) | u32 rank | u64 dims[rank] | data
//
// Sections are 8-byte aligned and laid out in table order.

enum class DType { U8, U16, F32, F64, C64, C128 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::U8: return 1;
    case DType::U16: return 2;
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::C64: return 8;
    case DType::C128: return 16;
  }
  return 0;
}

inline const char* dtype_tag(DType t) {
  switch (t) {
    case DType::U8: return "u8";
    case DType::U16: return "u16";
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::C64: return "c64";
    case DType::C128: return "c128";
  }
  return "";
}

inline std::optional<DType> dtype_from_tag(std::string_view tag) {
  for (DType t : {DType::U8, DType::U16, DType::F32, DType::F64, DType::C64, DType::C128})
    if (tag == dtype_tag(t)) return t;
  return std::nullopt;
}

inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kNameBytes = 16;
inline constexpr std::size_t kHeaderBytes = 16;
inline constexpr std::size_t kEntryBytes = kNameBytes + 16;

struct Array {
  DType dtype = DType::U8;
  std::vector<std::uint64_t> shape;
  std::vector<std::byte> data;

  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
};

template <typename T>
Array make_array(DType dtype, std::vector<std::uint64_t> shape, std::span<const T> values) {
  Array a;
  a.dtype = dtype;
  a.shape = std::move(shape);
  require(sizeof(T) == dtype_size(dtype), ErrorKind::Format, "array element size does not match dtype");
  require(a.count() == values.size(), ErrorKind::DimensionMismatch, "array shape does not match value count");
  const auto b = std::as_bytes(values);
  a.data.assign(b.begin(), b.end());
  return a;
}

template <typename T>
std::vector<T> array_values(const Array& a, DType expected, const std::string& name) {
  require(a.dtype == expected, ErrorKind::Format,
          "section '" + name + "': expected " + dtype_tag(expected) + ", found " + dtype_tag(a.dtype));
  std::vector<T> v(a.count());
  std::memcpy(v.data(), a.data.data(), a.data.size());
  return v;
}

inline Array text_array(const std::string& text) {
  return make_array<char>(DType::U8, {text.size()}, std::span<const char>(text.data(), text.size()));
}

class Container {
 public:
  void put(const std::string& name, Array a) {
    require(!name.empty() && name.size() <= kNameBytes, ErrorKind::Format,
            "section name '" + name + "' must be 1-16 bytes");
    require(a.count() * dtype_size(a.dtype) == a.data.size(), ErrorKind::Format,
            "section '" + name + "': shape does not match payload");
    for (auto& [n, arr] : sections_)
      if (n == name) {
        arr = std::move(a);
        return;
      }
    sections_.emplace_back(name, std::move(a));
  }

  bool has(const std::string& name) const {
    return std::any_of(sections_.begin(), sections_.end(), [&](const auto& s) { return s.first == name; });
  }

  const Array& get(const std::string& name) const {
    for (const auto& [n, a] : sections_)
      if (n == name) return a;
    throw Error(ErrorKind::Format, "missing section '" + name + "'");
  }

  std::string text(const std::string& name) const {
    const Array& a = get(name);
    require(a.dtype == DType::U8 && a.shape.size() == 1, ErrorKind::Format, "section '" + name + "' is not text");
    return {reinterpret_cast<const char*>(a.data.data()), a.data.size()};
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& s : sections_) out.push_back(s.first);
    return out;
  }

  std::vector<std::byte> serialize() const {
    std::vector<std::byte> out;
    auto put_raw = [&](const void* p, std::size_t n) {
      const auto* b = static_cast<const std::byte*>(p);
      out.insert(out.end(), b, b + n);
    };
    auto put_u16 = [&](std::uint16_t v) { put_raw(&v, 2); };
    auto put_u32 = [&](std::uint32_t v) { put_raw(&v, 4); };
    auto put_u64 = [&](std::uint64_t v) { put_raw(&v, 8); };
    auto pad8 = [&] { out.resize((out.size() + 7) / 8 * 8, std::byte{0}); };

    put_raw("SAGS", 4);
    put_u16(kContainerVersion);
    put_u16(0);
    put_u32(static_cast<std::uint32_t>(sections_.size()));
    put_u32(0);
    const std::size_t table = out.size();
    out.resize(table + sections_.size() * kEntryBytes, std::byte{0});
    pad8();

    for (std::size_t i = 0; i < sections_.size(); ++i) {
      const auto& [name, a] = sections_[i];
      const std::uint64_t offset = out.size();
      char tag[4] = {};
      std::memcpy(tag, dtype_tag(a.dtype), std::strlen(dtype_tag(a.dtype)));
      put_raw(tag, 4);
      put_u32(static_cast<std::uint32_t>(a.shape.size()));
      for (auto d : a.shape) put_u64(d);
      put_raw(a.data.data(), a.data.size());
      const std::uint64_t length = out.size() - offset;
      pad8();

      std::byte* e = out.data() + table + i * kEntryBytes;
      std::memcpy(e, name.data(), name.size());
      std::memcpy(e + kNameBytes, &offset, 8);
      std::memcpy(e + kNameBytes + 8, &length, 8);
    }
    return out;
  }

  static Container parse(std::span<const std::byte> bytes) {
    auto bad = [](const std::string& why) { throw Error(ErrorKind::Format, "container: " + why); };
    auto read = [&](std::size_t at, void* dst, std::size_t n) {
      if (at > bytes.size() || n > bytes.size() - at) bad("truncated");
      std::memcpy(dst, bytes.data() + at, n);
    };
    if (bytes.size() < kHeaderBytes || std::memcmp(bytes.data(), "SAGS", 4) != 0) bad("bad magic");
    std::uint16_t version = 0;
    std::uint32_t count = 0;
    read(4, &version, 2);
    read(8, &count, 4);
    if (version != kContainerVersion) bad("unsupported version " + std::to_string(version));
    const std::size_t table_end = kHeaderBytes + static_cast<std::size_t>(count) * kEntryBytes;
    if (table_end > bytes.size()) bad("section table runs past the end of the file");

    struct Entry {
      std::string name;
      std::uint64_t offset, length;
    };
    std::vector<Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::size_t at = kHeaderBytes + i * kEntryBytes;
      char name[kNameBytes + 1] = {};
      read(at, name, kNameBytes);
      Entry e{name, 0, 0};
      read(at + kNameBytes, &e.offset, 8);
      read(at + kNameBytes + 8, &e.length, 8);
      if (e.name.empty()) bad("empty section name");
      if (e.offset < table_end || e.offset > bytes.size() || e.length > bytes.size() - e.offset)
        bad("section '" + e.name + "' lies outside the payload area");
      entries.push_back(e);
    }
    auto sorted = entries;
    std::sort(sorted.begin(), sorted.end(), [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
    for (std::size_t i = 1; i < sorted.size(); ++i)
      if (sorted[i - 1].offset + sorted[i - 1].length > sorted[i].offset)
        bad("sections '" + sorted[i - 1].name + "' and '" + sorted[i].name + "' overlap");

    Container c;
    for (const auto& e : entries) {
      if (c.has(e.name)) bad("duplicate section '" + e.name + "'");
      if (e.length < 8) bad("section '" + e.name + "' has no manifest");
      char tag[5] = {};
      std::uint32_t rank = 0;
      read(e.offset, tag, 4);
      read(e.offset + 4, &rank, 4);
      const auto dtype = dtype_from_tag(tag);
      if (!dtype) bad("section '" + e.name + "' has unknown dtype '" + std::string(tag) + "'");
      if (8 + 8 * static_cast<std::uint64_t>(rank) > e.length) bad("section '" + e.name + "' manifest truncated");
      Array a;
      a.dtype = *dtype;
      a.shape.resize(rank);
      if (rank > 0) read(e.offset + 8, a.shape.data(), 8 * rank);
      const std::uint64_t payload = e.length - 8 - 8 * rank;
      // Division check guards against overflow in the product.
      std::uint64_t elems = 1;
      for (auto d : a.shape) {
        if (d != 0 && elems > payload / d) bad("section '" + e.name + "' declares more data than it holds");
        elems *= d;
      }
      if (elems * dtype_size(a.dtype) != payload)
        bad("section '" + e.name + "' declared shape does not match its payload size");
      a.data.resize(payload);
      read(e.offset + 8 + 8 * rank, a.data.data(), payload);
      c.sections_.emplace_back(e.name, std::move(a));
    }
    return c;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
  static Container load(const std::filesystem::path& path) { return parse(read_file(path)); }

 private:
  std::vector<std::pair<std::string, Array>> sections_;
};

// ---------------------------------------------------------------------------
// Frames

/// Frames as c64 [count, n_port, n_tx, n_delay, n_doppler]; path metadata as
/// f64 [count, n_paths, 7] (delay, doppler, gain re, gain im, aod, aoa, is_los).
inline void put_frames(Container& c, std::span<const ddchan::ChannelFrame> frames) {
  require(!frames.empty(), ErrorKind::InvalidInput, "put_frames: no frames");
  const auto& f0 = frames.front();
  const std::size_t n_paths = f0.paths.size();
  std::vector<std::complex<float>> h;
  h.reserve(frames.size() * f0.h.size());
  std::vector<double> paths;
  for (const auto& f : frames) {
    require(f.h.size() == f0.h.size() && f.paths.size() == n_paths && f.n_port == f0.n_port && f.n_tx == f0.n_tx &&
                f.n_delay == f0.n_delay,
            ErrorKind::DimensionMismatch, "put_frames: frame shapes differ");
    for (const auto& v : f.h) h.emplace_back(static_cast<float>(v.real()), static_cast<float>(v.imag()));
    for (const auto& p : f.paths)
      paths.insert(paths.end(), {p.delay, p.doppler, p.gain.real(), p.gain.imag(), p.aod, p.aoa, p.is_los ? 1.0 : 0.0});
  }
  c.put("frames", make_array<std::complex<float>>(
                      DType::C64, {frames.size(), f0.n_port, f0.n_tx, f0.n_delay, f0.n_doppler}, h));
  c.put("paths", make_array<double>(DType::F64, {frames.size(), n_paths, 7}, paths));
}

inline std::vector<ddchan::ChannelFrame> get_frames(const Container& c) {
  const Array& a = c.get("frames");
  require(a.shape.size() == 5, ErrorKind::Format, "section 'frames': expected rank 5");
  const auto h = array_values<std::complex<float>>(a, DType::C64, "frames");
  const Array& pa = c.get("paths");
  require(pa.shape.size() == 3 && pa.shape[0] == a.shape[0] && pa.shape[2] == 7, ErrorKind::Format,
          "section 'paths': shape does not match 'frames'");
  const auto paths = array_values<double>(pa, DType::F64, "paths");
  const std::size_t n = a.shape[0], n_paths = pa.shape[1];
  std::vector<ddchan::ChannelFrame> out;
  out.reserve(n);
  std::size_t hi = 0, pi = 0;
  for (std::size_t t = 0; t < n; ++t) {
    ddchan::ChannelFrame f(a.shape[1], a.shape[2], a.shape[3], a.shape[4]);
    f.frame_index = t;
    for (auto& v : f.h) {
      v = {h[hi].real(), h[hi].imag()};
      ++hi;
    }
    for (std::size_t p = 0; p < n_paths; ++p, pi += 7) {
      ddchan::Path q;
      q.delay = paths[pi];
      q.doppler = paths[pi + 1];
      q.gain = {paths[pi + 2], paths[pi + 3]};
      q.aod = paths[pi + 4];
      q.aoa = paths[pi + 5];
      q.is_los = paths[pi + 6] != 0.0;
      f.paths.push_back(q);
    }
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Calibration and token streams

namespace detail {

inline Array matrix_c128(const Eigen::MatrixXcd& m) {
  std::vector<Complex> v;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v.push_back(m(i, j));
  return make_array<Complex>(DType::C128, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, v);
}

inline Eigen::MatrixXcd c128_matrix(const Container& c, const std::string& name) {
  const Array& a = c.get(name);
  require(a.shape.size() == 2, ErrorKind::Format, "section '" + name + "': expected rank 2");
  const auto v = array_values<Complex>(a, DType::C128, name);
  Eigen::MatrixXcd m(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
  std::size_t k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = v[k++];
  return m;
}

}  // namespace detail

inline void put_calibration(Container& c, const compress::Calibration& cal) {
  const std::vector<double> meta{static_cast<double>(cal.ref_port), cal.energy_captured,
                                 static_cast<double>(cal.train_frame_count), cal.rank_deficient ? 1.0 : 0.0};
  c.put("cal.meta", make_array<double>(DType::F64, {meta.size()}, meta));
  c.put("cal.spatial", detail::matrix_c128(cal.spatial_basis));
  c.put("cal.dd", detail::matrix_c128(cal.dd_basis));
  c.put("cal.aoa", make_array<double>(DType::F64, {cal.aoa_estimates.size()}, cal.aoa_estimates));
  c.put("cal.pathpow", make_array<double>(DType::F64, {cal.path_powers.size()}, cal.path_powers));
}

inline compress::Calibration get_calibration(const Container& c) {
  const auto meta = array_values<double>(c.get("cal.meta"), DType::F64, "cal.meta");
  require(meta.size() == 4, ErrorKind::Format, "section 'cal.meta': expected 4 values");
  compress::Calibration cal;
  cal.ref_port = static_cast<std::size_t>(meta[0]);
  cal.energy_captured = meta[1];
  cal.train_frame_count = static_cast<std::size_t>(meta[2]);
  cal.rank_deficient = meta[3] != 0.0;
  cal.spatial_basis = detail::c128_matrix(c, "cal.spatial");
  cal.dd_basis = detail::c128_matrix(c, "cal.dd");
  cal.aoa_estimates = array_values<double>(c.get("cal.aoa"), DType::F64, "cal.aoa");
  cal.path_powers = array_values<double>(c.get("cal.pathpow"), DType::F64, "cal.pathpow");
  return cal;
}

/// Equal-length token streams as u16 [n, stream_len] plus f64 scales [n, window_len].
inline void put_tokens(Container& c, const std::string& name, std::span<const tokenize::TokenStream> streams) {
  require(!streams.empty(), ErrorKind::InvalidInput, "put_tokens: no streams");
  const std::size_t len = streams.front().tokens.size(), wl = streams.front().window_len;
  std::vector<std::uint16_t> tok;
  std::vector<double> sc;
  for (const auto& s : streams) {
    require(s.tokens.size() == len && s.window_len == wl && s.scales.size() == wl, ErrorKind::DimensionMismatch,
            "put_tokens: stream lengths differ");
    tok.insert(tok.end(), s.tokens.begin(), s.tokens.end());
    sc.insert(sc.end(), s.scales.begin(), s.scales.end());
  }
  c.put(name, make_array<std::uint16_t>(DType::U16, {streams.size(), len}, tok));
  c.put(name + ".scale", make_array<double>(DType::F64, {streams.size(), wl}, sc));
}

inline std::vector<tokenize::TokenStream> get_tokens(const Container& c, const std::string& name) {
  const Array& a = c.get(name);
  const Array& s = c.get(name + ".scale");
  require(a.shape.size() == 2 && s.shape.size() == 2 && a.shape[0] == s.shape[0], ErrorKind::Format,
          "section '" + name + "': token and scale shapes disagree");
  const auto tok = array_values<std::uint16_t>(a, DType::U16, name);
  const auto sc = array_values<double>(s, DType::F64, name + ".scale");
  std::vector<tokenize::TokenStream> out(a.shape[0]);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].window_len = s.shape[1];
    out[i].tokens.assign(tok.begin() + static_cast<std::ptrdiff_t>(i * a.shape[1]),
                         tok.begin() + static_cast<std::ptrdiff_t>((i + 1) * a.shape[1]));
    out[i].scales.assign(sc.begin() + static_cast<std::ptrdiff_t>(i * s.shape[1]),
                         sc.begin() + static_cast<std::ptrdiff_t>((i + 1) * s.shape[1]));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model states: spec as key=value text, trainables and AR weights as f32.
// The frozen backbone is regenerated from the seed and checked by hash.

namespace detail {

inline std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

}  // namespace detail

inline void put_model(Container& c, const std::string& name, const predict::ModelState& m) {
  const auto& s = m.spec;
  std::ostringstream t;
  t << "kind=" << predict::to_string(s.kind) << "\nlookback=" << s.lookback << "\nhorizon=" << s.horizon
    << "\nd_model=" << s.d_model << "\nn_layers=" << s.n_layers << "\nn_heads=" << s.n_heads
    << "\nlora_rank=" << s.lora_rank << "\nffn_dim=" << s.ffn_dim << "\nlr=" << fmt(s.lr)
    << "\nepochs=" << s.epochs << "\nbatch_size=" << s.batch_size << "\nseed=" << s.seed
    << "\nresidual=" << s.residual << "\nar_anchor=" << s.ar_anchor << "\nval_fraction=" << fmt(s.val_fraction)
    << "\nar_ridge_fixed=" << (s.ar_ridge ? fmt(*s.ar_ridge) : std::string("auto")) << "\ncoeff_len=" << m.coeff_len
    << "\nar_ridge=" << fmt(m.ar_ridge) << "\nbest_epoch=" << m.best_epoch << "\ntrained=" << m.trained
    << "\nbackbone_hash=" << hex64(m.backbone.hash()) << "\n";
  c.put(name + ".spec", text_array(t.str()));

  std::vector<float> p;
  m.params.for_each([&](const std::string&, const predict::Mat& x) {
    for (Eigen::Index i = 0; i < x.size(); ++i) p.push_back(static_cast<float>(x(i)));
  });
  c.put(name + ".params", make_array<float>(DType::F32, {p.size()}, p));

  std::vector<float> w;
  for (Eigen::Index i = 0; i < m.ar_weights.rows(); ++i)
    for (Eigen::Index j = 0; j < m.ar_weights.cols(); ++j) w.push_back(static_cast<float>(m.ar_weights(i, j)));
  c.put(name + ".ar", make_array<float>(DType::F32,
                                        {static_cast<std::uint64_t>(m.ar_weights.rows()),
                                         static_cast<std::uint64_t>(m.ar_weights.cols())},
                                        w));
  c.put(name + ".loss", make_array<double>(DType::F64, {m.loss_log.size()}, m.loss_log));
}

inline predict::ModelState get_model(const Container& c, const std::string& name) {
  auto kv = detail::parse_kv(c.text(name + ".spec"));
  auto field = [&](const char* k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw Error(ErrorKind::Format, "model '" + name + "': spec lacks '" + k + "'");
    return it->second;
  };
  auto num = [&](const char* k) {
    try {
      return std::stod(field(k));
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::Format, "model '" + name + "': bad value for '" + k + "'");
    }
  };
  auto size = [&](const char* k) { return static_cast<std::size_t>(num(k)); };

  predict::PredictorSpec s;
  s.kind = predict::kind_from_string(field("kind"));
  s.lookback = size("lookback");
  s.horizon = size("horizon");
  s.d_model = size("d_model");
  s.n_layers = size("n_layers");
  s.n_heads = size("n_heads");
  s.lora_rank = size("lora_rank");
  s.ffn_dim = size("ffn_dim");
  s.lr = num("lr");
  s.epochs = size("epochs");
  s.batch_size = size("batch_size");
  s.seed = std::stoull(field("seed"));
  s.residual = num("residual") != 0;
  s.ar_anchor = num("ar_anchor") != 0;
  s.val_fraction = num("val_fraction");
  if (field("ar_ridge_fixed") != "auto") s.ar_ridge = num("ar_ridge_fixed");

  predict::ModelState m = predict::init_model(s, size("coeff_len"));
  require(hex64(m.backbone.hash()) == field("backbone_hash"), ErrorKind::Format,
          "model '" + name + "': regenerated backbone does not match the stored hash");
  m.ar_ridge = num("ar_ridge");
  m.best_epoch = size("best_epoch");
  m.trained = num("trained") != 0;

  const auto p = array_values<float>(c.get(name + ".params"), DType::F32, name + ".params");
  require(p.size() == m.params.count(), ErrorKind::DimensionMismatch,
          "model '" + name + "': parameter count does not match its predictor settings");
  std::size_t k = 0;
  m.params.for_each([&](const std::string&, predict::Mat& x) {
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = p[k++];
  });

  const Array& wa = c.get(name + ".ar");
  require(wa.shape.size() == 2, ErrorKind::Format, "model '" + name + "': AR weights must be rank 2");
  const auto w = array_values<float>(wa, DType::F32, name + ".ar");
  m.ar_weights.resize(static_cast<Eigen::Index>(wa.shape[0]), static_cast<Eigen::Index>(wa.shape[1]));
  k = 0;
  for (Eigen::Index i = 0; i < m.ar_weights.rows(); ++i)
    for (Eigen::Index j = 0; j < m.ar_weights.cols(); ++j) m.ar_weights(i, j) = w[k++];
  m.loss_log = array_values<double>(c.get(name + ".loss"), DType::F64, name + ".loss");
  return m;
}

// ---------------------------------------------------------------------------
// SGIM images: "SGIM" | u32 width | u32 height | u32 0 | width*height bytes

inline std::vector<std::byte> encode_sgim(const semlink::GrayImage& img) {
  std::vector<std::byte> out(16 + img.px.size());
  const std::uint32_t hdr[3] = {static_cast<std::uint32_t>(img.width), static_cast<std::uint32_t>(img.height), 0};
  std::memcpy(out.data(), "SGIM", 4);
  std::memcpy(out.data() + 4, hdr, 12);
  for (std::size_t i = 0; i < img.px.size(); ++i)
    out[16 + i] = static_cast<std::byte>(static_cast<std::uint8_t>(std::clamp(std::round(img.px[i]), 0.0, 255.0)));
  return out;
}

inline semlink::GrayImage decode_sgim(std::span<const std::byte> b) {
  require(b.size() >= 16 && std::memcmp(b.data(), "SGIM", 4) == 0, ErrorKind::Format, "sgim: bad magic");
  std::uint32_t hdr[3];
  std::memcpy(hdr, b.data() + 4, 12);
  require(static_cast<std::uint64_t>(hdr[0]) * hdr[1] == b.size() - 16, ErrorKind::Format,
          "sgim: pixel count does not match the header");
  semlink::GrayImage img(hdr[0], hdr[1]);
  for (std::size_t i = 0; i < img.px.size(); ++i) img.px[i] = static_cast<double>(static_cast<std::uint8_t>(b[16 + i]));
  return img;
}

inline void write_sgim(const std::filesystem::path& path, const semlink::GrayImage& img) {
  write_file_atomic(path, encode_sgim(img));
}

inline semlink::GrayImage read_sgim(const std::filesystem::path& path) { return decode_sgim(read_file(path)); }

/// Every *.sgim file in `dir`, by file name.
inline std::vector<semlink::GrayImage> read_corpus(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorKind::Io, "corpus directory '" + dir.string() + "' not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".sgim") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<semlink::GrayImage> out;
  for (const auto& f : files) out.push_back(read_sgim(f));
  return out;
}

// ---------------------------------------------------------------------------
// Experiment config
//
//   seed = 7
//   [ddchan]
//   n_delay = 16
//   ...
// '#' and ';' start comments. Keys are unique per section.

struct SemlinkOptions {
  std::size_t corpus_size = 50;
  std::size_t trials = 5;
  double snr_min = -10, snr_max = 20, snr_step = 5;
  semlink::Equalizer equalizer = semlink::Equalizer::BlockZf;
  bool interleave = true;
};

struct EvalOptions {
  std::size_t n_train = 500;
  std::size_t n_test = 100;
  std::size_t stride = 1;
  double snr_min = 0, snr_max = 20, snr_step = 2;
};

struct ExperimentConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;
  ddchan::DdConfig dd = ddchan::DdConfig::desk();
  std::optional<std::size_t> frame_count;  // unset: whatever the evaluation layout needs
  std::size_t spatial_rank = 4, dd_rank = 16;
  predict::PredictorSpec predict;
  EvalOptions eval;
  uwachan::UwaConfig uwa;
  SemlinkOptions sem;

  pipeline::TaskLayout layout() const {
    pipeline::TaskLayout l;
    l.lookback = dd.lookback;
    l.horizon = dd.horizon;
    l.n_train = eval.n_train;
    l.n_test = eval.n_test;
    l.stride = eval.stride;
    return l;
  }

  /// Channel config with the frame count and seed resolved.
  ddchan::DdConfig channel() const {
    ddchan::DdConfig c = dd;
    c.frame_count = frame_count.value_or(layout().frames_needed());
    c.seed = seed;
    return c;
  }

  predict::PredictorSpec predictor(predict::Kind kind) const {
    predict::PredictorSpec s = predict;
    s.kind = kind;
    s.lookback = dd.lookback;
    s.horizon = dd.horizon;
    s.seed = seed;
    return s;
  }

  uwachan::UwaConfig underwater() const {
    uwachan::UwaConfig u = uwa;
    u.seed = seed;
    return u;
  }

  semlink::LinkBudget budget() const {
    auto b = semlink::make_budget(uwa);
    b.equalizer = sem.equalizer;
    b.interleave = sem.interleave;
    return b;
  }
};

inline std::vector<double> snr_grid(double lo, double hi, double step) {
  std::vector<double> g;
  const auto n = static_cast<long>(std::floor((hi - lo) / step + 1e-9));
  for (long i = 0; i <= n; ++i) g.push_back(lo + static_cast<double>(i) * step);
  return g;
}

inline ddchan::DdConfig profile_defaults(const std::string& profile) {
  if (profile == "desk") return ddchan::DdConfig::desk();
  if (profile == "paper") return ddchan::DdConfig::paper();
  throw Error(ErrorKind::InvalidConfig, "profile: expected 'desk' or 'paper', got '" + profile + "'");
}

namespace detail {

struct Field {
  std::string section, key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

[[noreturn]] inline void bad_value(const Field& f, const std::string& v, const char* want) {
  const std::string where = f.section.empty() ? f.key : "[" + f.section + "] " + f.key;
  throw Error(ErrorKind::InvalidConfig, where + ": expected " + want + ", got '" + v + "'");
}

inline double to_double(const Field& f, const std::string& v) {
  double x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(f, v, "a number");
  return x;
}

inline std::uint64_t to_u64(const Field& f, const std::string& v) {
  std::uint64_t x = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), x);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) bad_value(f, v, "a non-negative integer");
  return x;
}

inline bool to_bool(const Field& f, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(f, v, "true or false");
}

template <typename Ref>
Field real(std::string sec, std::string key, Ref ref) {
  Field f{std::move(sec), std::move(key), {}, {}};
  f.set = [ref, f](ExperimentConfig& c, const std::string& v) { ref(c) = to_double(f, v); };
  f.get = [ref](const ExperimentConfig& c) { return fmt(ref(const_cast<ExperimentConfig&>(c))); };
  return f;
}

template <typename Ref>
Field count(std::string sec, std::string key, Ref ref) {
  Field f{std::move(sec), std::move(key), {}, {}};
  f.set = [ref, f](ExperimentConfig& c, const std::string& v) { ref(c) = static_cast<std::size_t>(to_u64(f, v)); };
  f.get = [ref](const ExperimentConfig& c) {
    return fmt(static_cast<std::uint64_t>(ref(const_cast<ExperimentConfig&>(c))));
  };
  return f;
}

template <typename Ref>
Field flag(std::string sec, std::string key, Ref ref) {
  Field f{std::move(sec), std::move(key), {}, {}};
  f.set = [ref, f](ExperimentConfig& c, const std::string& v) { ref(c) = to_bool(f, v); };
  f.get = [ref](const ExperimentConfig& c) {
    return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
  };
  return f;
}

/// Optional real; "auto" clears it.
template <typename Ref>
Field maybe_real(std::string sec, std::string key, Ref ref) {
  Field f{std::move(sec), std::move(key), {}, {}};
  f.set = [ref, f](ExperimentConfig& c, const std::string& v) {
    if (v == "auto") {
      ref(c).reset();
    } else {
      ref(c) = to_double(f, v);
    }
  };
  f.get = [ref](const ExperimentConfig& c) {
    const auto& o = ref(const_cast<ExperimentConfig&>(c));
    return o ? fmt(*o) : std::string("auto");
  };
  return f;
}

inline const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> all = [] {
    std::vector<Field> v;
    {
      Field f{"", "seed", {}, {}};
      f.set = [f](C& c, const std::string& s) { c.seed = to_u64(f, s); };
      f.get = [](const C& c) { return fmt(c.seed); };
      v.push_back(f);
    }
    const std::string dd = "ddchan";
    v.push_back(count(dd, "n_delay", [](C& c) -> auto& { return c.dd.n_delay; }));
    v.push_back(count(dd, "n_doppler", [](C& c) -> auto& { return c.dd.n_doppler; }));
    v.push_back(real(dd, "subcarrier_spacing", [](C& c) -> auto& { return c.dd.subcarrier_spacing; }));
    v.push_back(count(dd, "n_tx", [](C& c) -> auto& { return c.dd.n_tx; }));
    v.push_back(count(dd, "n_port", [](C& c) -> auto& { return c.dd.n_port; }));
    v.push_back(real(dd, "carrier_freq", [](C& c) -> auto& { return c.dd.carrier_freq; }));
    v.push_back(maybe_real(dd, "port_spacing", [](C& c) -> auto& { return c.dd.port_spacing; }));
    v.push_back(count(dd, "n_paths", [](C& c) -> auto& { return c.dd.n_paths; }));
    v.push_back(real(dd, "max_doppler", [](C& c) -> auto& { return c.dd.max_doppler; }));
    v.push_back(real(dd, "rice_k_db", [](C& c) -> auto& { return c.dd.rice_k_db; }));
    {
      Field f{dd, "frame_count", {}, {}};
      f.set = [f](C& c, const std::string& s) {
        if (s == "auto") {
          c.frame_count.reset();
        } else {
          c.frame_count = static_cast<std::size_t>(to_u64(f, s));
        }
      };
      f.get = [](const C& c) { return c.frame_count ? fmt(static_cast<std::uint64_t>(*c.frame_count)) : "auto"; };
      v.push_back(f);
    }
    v.push_back(count(dd, "lookback", [](C& c) -> auto& { return c.dd.lookback; }));
    v.push_back(count(dd, "horizon", [](C& c) -> auto& { return c.dd.horizon; }));
    v.push_back(real(dd, "temporal_rho", [](C& c) -> auto& { return c.dd.temporal_rho; }));
    v.push_back(real(dd, "doppler_drift", [](C& c) -> auto& { return c.dd.doppler_drift; }));
    v.push_back(real(dd, "los_phase_step", [](C& c) -> auto& { return c.dd.los_phase_step; }));

    const std::string cp = "compress";
    v.push_back(count(cp, "spatial_rank", [](C& c) -> auto& { return c.spatial_rank; }));
    v.push_back(count(cp, "dd_rank", [](C& c) -> auto& { return c.dd_rank; }));

    const std::string pr = "predict";
    v.push_back(count(pr, "d_model", [](C& c) -> auto& { return c.predict.d_model; }));
    v.push_back(count(pr, "n_layers", [](C& c) -> auto& { return c.predict.n_layers; }));
    v.push_back(count(pr, "n_heads", [](C& c) -> auto& { return c.predict.n_heads; }));
    v.push_back(count(pr, "lora_rank", [](C& c) -> auto& { return c.predict.lora_rank; }));
    v.push_back(count(pr, "ffn_dim", [](C& c) -> auto& { return c.predict.ffn_dim; }));
    v.push_back(real(pr, "lr", [](C& c) -> auto& { return c.predict.lr; }));
    v.push_back(count(pr, "epochs", [](C& c) -> auto& { return c.predict.epochs; }));
    v.push_back(count(pr, "batch_size", [](C& c) -> auto& { return c.predict.batch_size; }));
    v.push_back(flag(pr, "residual", [](C& c) -> auto& { return c.predict.residual; }));
    v.push_back(maybe_real(pr, "ar_ridge", [](C& c) -> auto& { return c.predict.ar_ridge; }));
    v.push_back(flag(pr, "ar_anchor", [](C& c) -> auto& { return c.predict.ar_anchor; }));
    v.push_back(real(pr, "val_fraction", [](C& c) -> auto& { return c.predict.val_fraction; }));

    const std::string ev = "eval";
    v.push_back(count(ev, "n_train", [](C& c) -> auto& { return c.eval.n_train; }));
    v.push_back(count(ev, "n_test", [](C& c) -> auto& { return c.eval.n_test; }));
    v.push_back(count(ev, "stride", [](C& c) -> auto& { return c.eval.stride; }));
    v.push_back(real(ev, "snr_min", [](C& c) -> auto& { return c.eval.snr_min; }));
    v.push_back(real(ev, "snr_max", [](C& c) -> auto& { return c.eval.snr_max; }));
    v.push_back(real(ev, "snr_step", [](C& c) -> auto& { return c.eval.snr_step; }));

    const std::string uw = "uwachan";
    v.push_back(real(uw, "range", [](C& c) -> auto& { return c.uwa.range; }));
    v.push_back(real(uw, "depth", [](C& c) -> auto& { return c.uwa.depth; }));
    v.push_back(real(uw, "center_freq", [](C& c) -> auto& { return c.uwa.center_freq; }));
    v.push_back(real(uw, "bandwidth", [](C& c) -> auto& { return c.uwa.bandwidth; }));
    v.push_back(real(uw, "sound_speed", [](C& c) -> auto& { return c.uwa.sound_speed; }));
    v.push_back(count(uw, "n_taps", [](C& c) -> auto& { return c.uwa.n_taps; }));
    {
      Field f{uw, "tap_mode", {}, {}};
      f.set = [f](C& c, const std::string& s) {
        if (s == "override") {
          c.uwa.tap_mode = uwachan::TapMode::Override;
        } else if (s == "formula") {
          c.uwa.tap_mode = uwachan::TapMode::Formula;
        } else {
          bad_value(f, s, "override or formula");
        }
      };
      f.get = [](const C& c) { return std::string(c.uwa.tap_mode == uwachan::TapMode::Override ? "override" : "formula"); };
      v.push_back(f);
    }
    v.push_back(real(uw, "rice_k_db", [](C& c) -> auto& { return c.uwa.rice_k_db; }));
    v.push_back(real(uw, "v_rel", [](C& c) -> auto& { return c.uwa.v_rel; }));
    v.push_back(real(uw, "delay_jitter_sigma", [](C& c) -> auto& { return c.uwa.delay_jitter_sigma; }));
    v.push_back(count(uw, "jitter_block", [](C& c) -> auto& { return c.uwa.jitter_block; }));

    const std::string sl = "semlink";
    v.push_back(count(sl, "corpus_size", [](C& c) -> auto& { return c.sem.corpus_size; }));
    v.push_back(count(sl, "trials", [](C& c) -> auto& { return c.sem.trials; }));
    v.push_back(real(sl, "snr_min", [](C& c) -> auto& { return c.sem.snr_min; }));
    v.push_back(real(sl, "snr_max", [](C& c) -> auto& { return c.sem.snr_max; }));
    v.push_back(real(sl, "snr_step", [](C& c) -> auto& { return c.sem.snr_step; }));
    {
      Field f{sl, "equalizer", {}, {}};
      f.set = [f](C& c, const std::string& s) {
        if (s == "block_zf") {
          c.sem.equalizer = semlink::Equalizer::BlockZf;
        } else if (s == "one_tap_zf") {
          c.sem.equalizer = semlink::Equalizer::OneTapZf;
        } else {
          bad_value(f, s, "block_zf or one_tap_zf");
        }
      };
      f.get = [](const C& c) {
        return std::string(c.sem.equalizer == semlink::Equalizer::BlockZf ? "block_zf" : "one_tap_zf");
      };
      v.push_back(f);
    }
    v.push_back(flag(sl, "interleave", [](C& c) -> auto& { return c.sem.interleave; }));
    return v;
  }();
  return all;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Checks every value against its module's invariants; errors name the key.
inline void validate(const ExperimentConfig& c) {
  auto in = [](const char* section, const Error& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("[") + section + "] " + (e.what() + std::strlen(to_string(e.kind())) + 2));
  };
  auto bad = [](const char* where, const std::string& why) { throw Error(ErrorKind::InvalidConfig, std::string(where) + ": " + why); };
  try {
    c.channel().validate();
  } catch (const Error& e) {
    in("ddchan", e);
  }
  if (c.spatial_rank < 1 || c.spatial_rank > c.dd.n_tx) bad("[compress] spatial_rank", "must lie in [1, n_tx]");
  if (c.dd_rank < 1 || c.dd_rank > c.dd.dd_size()) bad("[compress] dd_rank", "must lie in [1, n_delay*n_doppler]");
  try {
    c.predictor(predict::Kind::LoraTransformer).validate();
  } catch (const Error& e) {
    in("predict", e);
  }
  if (c.eval.n_train < 1) bad("[eval] n_train", "must be >= 1");
  if (c.eval.n_test < 30) bad("[eval] n_test", "must be >= 30");
  if (c.eval.stride < 1) bad("[eval] stride", "must be >= 1");
  if (!(c.eval.snr_step > 0)) bad("[eval] snr_step", "must be > 0");
  if (!(c.eval.snr_max >= c.eval.snr_min)) bad("[eval] snr_max", "must be >= snr_min");
  try {
    c.uwa.validate();
  } catch (const Error& e) {
    in("uwachan", e);
  }
  if (c.sem.corpus_size < 50) bad("[semlink] corpus_size", "must be >= 50");
  if (c.sem.trials < 5) bad("[semlink] trials", "must be >= 5");
  if (!(c.sem.snr_step > 0)) bad("[semlink] snr_step", "must be > 0");
  if (!(c.sem.snr_max >= c.sem.snr_min)) bad("[semlink] snr_max", "must be >= snr_min");
}

/// Parses `text` over the defaults of `profile`. Unknown sections or keys,
/// repeated keys and malformed values are rejected with the key named.
inline ExperimentConfig parse_config(const std::string& text, const std::string& profile = "desk") {
  ExperimentConfig c;
  c.profile = profile;
  c.dd = profile_defaults(profile);
  static const std::vector<std::string> sections{"", "ddchan", "compress", "predict", "uwachan", "semlink", "eval"};
  std::istringstream in(text);
  std::string line, section;
  std::vector<std::string> seen;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find_first_of("#;");
    line = detail::trim(hash == std::string::npos ? line : line.substr(0, hash));
    if (line.empty()) continue;
    const std::string at = "line " + std::to_string(lineno) + ": ";
    if (line.front() == '[') {
      require(line.back() == ']', ErrorKind::InvalidConfig, at + "unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      require(std::find(sections.begin(), sections.end(), section) != sections.end() && !section.empty(),
              ErrorKind::InvalidConfig, at + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::InvalidConfig, at + "expected key = value");
    const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
    const std::string where = section.empty() ? key : "[" + section + "] " + key;
    const auto& fs = detail::fields();
    const auto it = std::find_if(fs.begin(), fs.end(), [&](const auto& f) { return f.section == section && f.key == key; });
    require(it != fs.end(), ErrorKind::InvalidConfig, where + ": unknown key");
    require(std::find(seen.begin(), seen.end(), where) == seen.end(), ErrorKind::InvalidConfig, where + ": repeated key");
    seen.push_back(where);
    it->set(c, value);
  }
  validate(c);
  return c;
}

/// Every resolved value, one section after another; parse_config of this
/// text under the same profile gives back the same config.
inline std::string canonical_text(const ExperimentConfig& c) {
  std::string out = "# profile " + c.profile + "\n";
  std::string section = "\x01";
  for (const auto& f : detail::fields()) {
    if (f.section != section) {
      section = f.section;
      if (!section.empty()) out += "[" + section + "]\n";
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

inline std::uint64_t config_hash(const ExperimentConfig& c) {
  const std::string t = canonical_text(c);
  return fnv1a(std::as_bytes(std::span<const char>(t.data(), t.size())));
}

// ---------------------------------------------------------------------------
// CSV with a manifest sidecar (<csv>.manifest): run header, then one line per
// data row carrying what is needed to regenerate it.

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline std::string csv_text(const Csv& t) {
  std::string out;
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += "\n";
  for (const auto& r : t.rows) {
    require(r.size() == t.header.size(), ErrorKind::DimensionMismatch, "csv: row width differs from header");
    for (std::size_t i = 0; i < r.size(); ++i) out += (i ? "," : "") + fmt(r[i]);
    out += "\n";
  }
  return out;
}

inline std::filesystem::path manifest_path(const std::filesystem::path& csv) {
  std::filesystem::path m = csv;
  m += ".manifest";
  return m;
}

inline void write_csv(const std::filesystem::path& path, const Csv& t, const std::string& command,
                      const ExperimentConfig& cfg) {
  const std::string hash = hex64(config_hash(cfg)), seed = fmt(cfg.seed);
  std::string man = "command=" + command + "\nversion=" + kVersion + "\nprofile=" + cfg.profile +
                    "\nconfig_hash=" + hash + "\nseed=" + seed + "\n";
  for (std::size_t i = 0; i < t.rows.size(); ++i)
    man += "row=" + std::to_string(i) + " " + t.header.front() + "=" + fmt(t.rows[i].front()) +
           " config_hash=" + hash + " seed=" + seed + "\n";
  write_text_atomic(path, csv_text(t));
  write_text_atomic(manifest_path(path), man);
}

}  // namespace sagsin::io
