#include "latentflow/data_io.hpp"

#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "latentflow/errors.hpp"

namespace latentflow {

Tensor Dataset::row(std::size_t i) const {
  Tensor r({width()});
  for (std::size_t j = 0; j < width(); ++j) r(j) = items(i, j);
  return r;
}

std::vector<std::size_t> Dataset::train_indices() const {
  std::vector<bool> held(size(), false);
  for (std::size_t i : holdout) held[i] = true;
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < size(); ++i)
    if (!held[i]) idx.push_back(i);
  return idx;
}

void Dataset::split_holdout(double fraction) {
  holdout.clear();
  if (fraction <= 0.0) return;
  const auto n_hold = static_cast<std::size_t>(
      std::floor(fraction * static_cast<double>(size())));
  for (std::size_t i = size() - n_hold; i < size(); ++i) holdout.push_back(i);
}

Dataset make_toy_four_points() {
  const std::size_t width = 16, rep = 8;
  Tensor items({4, width});
  for (std::size_t r = 0; r < 4; ++r) {
    const double bit0 = (r >> 1) & 1 ? 1.0 : 0.0;
    const double bit1 = r & 1 ? 1.0 : 0.0;
    for (std::size_t j = 0; j < rep; ++j) {
      items(r, j) = bit0;
      items(r, rep + j) = bit1;
    }
  }
  return Dataset{std::move(items), true, {}};
}

Dataset make_linear_gaussian_synthetic(const Tensor& w, double sigma,
                                       std::size_t n, Rng& rng) {
  if (!(sigma > 0.0))
    throw ConfigError("linear gaussian data: sigma must be positive");
  const std::size_t dx = w.dim(0), dz = w.dim(1);
  Tensor items({n, dx});
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor z = rng.normal_tensor({dz});
    for (std::size_t r = 0; r < dx; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < dz; ++c) acc += w(r, c) * z(c);
      items(i, r) = acc + sigma * rng.normal();
    }
  }
  return Dataset{std::move(items), false, {}};
}

namespace {

std::uint32_t read_be_u32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) |
         static_cast<std::uint32_t>(p[3]);
}

}  // namespace

Tensor load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("idx: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 4) throw FormatError("idx: truncated header");
  if (bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08)
    throw FormatError("idx: bad magic (expected unsigned-byte data)");
  const std::size_t ndim = bytes[3];
  if (ndim < 1 || ndim > 4)
    throw FormatError("idx: unsupported dimension count " +
                      std::to_string(ndim));
  if (bytes.size() < 4 + 4 * ndim) throw FormatError("idx: truncated header");
  std::vector<std::size_t> shape(ndim);
  std::size_t numel = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    const std::uint32_t v = read_be_u32(bytes.data() + 4 + 4 * d);
    shape[d] = v;
    if (v != 0 && numel > std::numeric_limits<std::size_t>::max() / v)
      throw FormatError("idx: dimension overflow");
    numel *= v;
  }
  if (bytes.size() != 4 + 4 * ndim + numel)
    throw FormatError("idx: payload size " +
                      std::to_string(bytes.size() - 4 - 4 * ndim) +
                      " does not match dims (" + std::to_string(numel) + ")");
  Tensor out(shape);
  for (std::size_t i = 0; i < numel; ++i)
    out[i] = static_cast<double>(bytes[4 + 4 * ndim + i]) / 255.0;
  return out;
}

Dataset binarize(const Tensor& data, BinarizeMode mode, Rng* rng) {
  Tensor out = data;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = out[i];
    if (v < 0.0 || v > 1.0)
      throw NumericError("binarize: value " + std::to_string(v) +
                         " outside [0,1]");
    if (mode == BinarizeMode::kThreshold) {
      out[i] = v >= 0.5 ? 1.0 : 0.0;
    } else {
      if (rng == nullptr) throw ConfigError("binarize: stochastic mode needs an rng");
      out[i] = rng->uniform() < v ? 1.0 : 0.0;
    }
  }
  // Datasets are (N, D); accept matrices or flatten higher-rank images.
  if (out.rank() != 2) {
    const std::size_t n = out.dim(0);
    out = Tensor({n, out.size() / n}, std::vector<double>(out.buffer()));
  }
  return Dataset{std::move(out), true, {}};
}

// --- checkpoint --------------------------------------------------------------

void Checkpoint::put(const std::string& name, Tensor t) {
  tensors.emplace_back(name, std::move(t));
}
void Checkpoint::put(const std::string& name, std::uint64_t v) {
  scalars.emplace_back(name, v);
}
void Checkpoint::put(const std::string& name, std::string s) {
  strings.emplace_back(name, std::move(s));
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [k, v] : tensors)
    if (k == name) return v;
  throw FormatError("checkpoint: missing tensor section '" + name + "'");
}

std::uint64_t Checkpoint::scalar(const std::string& name) const {
  for (const auto& [k, v] : scalars)
    if (k == name) return v;
  throw FormatError("checkpoint: missing scalar section '" + name + "'");
}

const std::string& Checkpoint::str(const std::string& name) const {
  for (const auto& [k, v] : strings)
    if (k == name) return v;
  throw FormatError("checkpoint: missing string section '" + name + "'");
}

bool Checkpoint::has_tensor(const std::string& name) const {
  for (const auto& [k, v] : tensors) {
    (void)v;
    if (k == name) return true;
  }
  return false;
}

std::uint32_t crc32(const unsigned char* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k)
        c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xffffffffu;
  for (std::size_t i = 0; i < len; ++i)
    crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

namespace {

constexpr char kCkptMagic[8] = {'L', 'F', 'C', 'K', 'P', 'T', '0', '\n'};

enum : unsigned char { kSecTensor = 0, kSecScalar = 1, kSecString = 2 };

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back((v >> (8 * i)) & 0xffu);
}

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back((v >> (8 * i)) & 0xffu);
}

void put_f64(std::vector<unsigned char>& out, double d) {
  put_u64(out, std::bit_cast<std::uint64_t>(d));
}

struct Reader {
  const std::vector<unsigned char>& bytes;
  std::size_t at = 0;
  void need(std::size_t n) const {
    if (at + n > bytes.size()) throw FormatError("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
    at += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + at), n);
    at += n;
    return s;
  }
};

void put_section(std::vector<unsigned char>& out, unsigned char kind,
                 const std::string& name,
                 const std::vector<unsigned char>& payload) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  out.push_back(kind);
  put_u64(out, payload.size());
  out.insert(out.end(), payload.begin(), payload.end());
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::vector<unsigned char> out(kCkptMagic, kCkptMagic + sizeof(kCkptMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size() +
                                          ckpt.scalars.size() +
                                          ckpt.strings.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    std::vector<unsigned char> payload;
    put_u32(payload, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d = 0; d < t.rank(); ++d) put_u64(payload, t.dim(d));
    for (std::size_t i = 0; i < t.size(); ++i) put_f64(payload, t[i]);
    put_section(out, kSecTensor, name, payload);
  }
  for (const auto& [name, v] : ckpt.scalars) {
    std::vector<unsigned char> payload;
    put_u64(payload, v);
    put_section(out, kSecScalar, name, payload);
  }
  for (const auto& [name, s] : ckpt.strings) {
    std::vector<unsigned char> payload(s.begin(), s.end());
    put_section(out, kSecString, name, payload);
  }
  put_u32(out, crc32(out.data(), out.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open '" + path + "' for writing");
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("checkpoint: write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCkptMagic) + 8)
    throw FormatError("checkpoint: truncated file");
  if (std::memcmp(bytes.data(), kCkptMagic, sizeof(kCkptMagic)) != 0)
    throw FormatError("checkpoint: bad magic");
  // CRC is little-endian like everything else; recompute over the prefix.
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i)
    stored_crc |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i])
                  << (8 * i);
  if (crc32(bytes.data(), bytes.size() - 4) != stored_crc)
    throw FormatError("checkpoint: checksum mismatch");

  Reader r{bytes, sizeof(kCkptMagic)};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: version " + std::to_string(version) +
                      " not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::uint32_t sections = r.u32();
  Checkpoint ckpt;
  for (std::uint32_t s = 0; s < sections; ++s) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    r.need(1);
    const unsigned char kind = r.bytes[r.at++];
    const std::uint64_t payload_len = r.u64();
    const std::size_t end = r.at + payload_len;
    r.need(payload_len);
    switch (kind) {
      case kSecTensor: {
        const std::uint32_t rank = r.u32();
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = r.u64();
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = r.f64();
        ckpt.put(name, std::move(t));
        break;
      }
      case kSecScalar:
        ckpt.put(name, r.u64());
        break;
      case kSecString:
        ckpt.put(name, r.str(payload_len));
        break;
      default:
        throw FormatError("checkpoint: unknown section kind");
    }
    if (r.at != end) throw FormatError("checkpoint: section length mismatch");
  }
  if (r.at != bytes.size() - 4)
    throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

// --- metrics -----------------------------------------------------------------

namespace {

std::string fmt_f64(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v,
                                 std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

}  // namespace

void write_metrics(const std::string& path,
                   const std::vector<StepRecord>& history) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("metrics: cannot open '" + path + "' for writing");
  f << "step,elbo,logpx,logpz,logqz,kl_est,grad_norm,beta\n";
  for (const auto& r : history) {
    f << r.step << ',' << fmt_f64(r.elbo) << ',' << fmt_f64(r.logpx) << ','
      << fmt_f64(r.logpz) << ',' << fmt_f64(r.logqz) << ','
      << fmt_f64(r.kl_est) << ',' << fmt_f64(r.grad_norm) << ','
      << fmt_f64(r.beta) << '\n';
  }
  if (!f) throw IoError("metrics: write to '" + path + "' failed");
}

}  // namespace latentflow
