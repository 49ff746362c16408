#include "finegates/model.h"

#include <fmt/format.h>
#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace finegates::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'F', 'G', 'C', 'K'};

std::string shape_string(const std::vector<std::size_t>& shape) {
  if (shape.empty()) return "-";
  return fmt::format("{}", fmt::join(shape, "x"));
}

std::vector<std::size_t> parse_shape(const std::string& s) {
  std::vector<std::size_t> out;
  if (s == "-") return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, 'x')) out.push_back(std::stoull(item));
  return out;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }

bool has_whitespace(const std::string& s) {
  return s.find_first_of(" \t\n\r") != std::string::npos;
}

Matrix matrix_from(const Container& c, const std::string& name, std::size_t rows, std::size_t cols) {
  const auto& t = c.tensor(name);
  if (t.shape.size() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
    throw Error(ErrorKind::ShapeMismatch,
                fmt::format("tensor '{}' has shape {}, expected {}x{}", name, shape_string(t.shape), rows, cols));
  }
  Matrix m(rows, cols);
  const auto v = as_f64(t);
  std::copy(v.begin(), v.end(), m.values().begin());
  return m;
}

Vector vector_from(const Container& c, const std::string& name, std::size_t n) {
  const auto& t = c.tensor(name);
  if (t.shape.size() != 1 || t.shape[0] != n) {
    throw Error(ErrorKind::ShapeMismatch,
                fmt::format("tensor '{}' has shape {}, expected {}", name, shape_string(t.shape), n));
  }
  return as_f64(t);
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(::crc32(c, bytes.data(), static_cast<uInt>(bytes.size())));
}

const TensorRecord& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw Error(ErrorKind::CheckpointMissing, "tensor '" + name + "' not present");
}

bool Container::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

TensorRecord f64_tensor(std::string name, std::vector<std::size_t> shape, std::span<const double> values) {
  if (element_count(shape) != values.size()) throw Error(ErrorKind::ShapeMismatch, name + ": shape does not match data");
  TensorRecord t{std::move(name), "f64", std::move(shape), {}};
  t.bytes.resize(values.size() * sizeof(double));
  if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), t.bytes.size());
  return t;
}

TensorRecord i64_tensor(std::string name, std::span<const std::int64_t> values) {
  TensorRecord t{std::move(name), "i64", {values.size()}, {}};
  t.bytes.resize(values.size() * sizeof(std::int64_t));
  if (!values.empty()) std::memcpy(t.bytes.data(), values.data(), t.bytes.size());
  return t;
}

std::vector<double> as_f64(const TensorRecord& t) {
  if (t.dtype != "f64") throw Error(ErrorKind::ShapeMismatch, t.name + ": expected f64 tensor");
  std::vector<double> v(t.bytes.size() / sizeof(double));
  if (!v.empty()) std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
  return v;
}

std::vector<std::int64_t> as_i64(const TensorRecord& t) {
  if (t.dtype != "i64") throw Error(ErrorKind::ShapeMismatch, t.name + ": expected i64 tensor");
  std::vector<std::int64_t> v(t.bytes.size() / sizeof(std::int64_t));
  if (!v.empty()) std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
  return v;
}

void write_container(const Container& c, const std::filesystem::path& path) {
  std::ostringstream manifest;
  manifest << "kind " << c.kind << "\n";
  for (const auto& [k, v] : c.meta) {
    if (has_whitespace(k) || v.find('\n') != std::string::npos) {
      throw Error(ErrorKind::IoError, "meta entry '" + k + "' cannot be encoded");
    }
    manifest << "meta " << k << " " << v << "\n";
  }
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    if (has_whitespace(t.name)) throw Error(ErrorKind::IoError, "tensor name '" + t.name + "' contains whitespace");
    manifest << fmt::format("tensor {} {} {} {} {} {:08x}\n", t.name, t.dtype, shape_string(t.shape), offset,
                            t.bytes.size(), crc32(t.bytes));
    offset += t.bytes.size();
  }
  const std::string text = manifest.str();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::IoError, "cannot open '" + path.string() + "' for writing");
  os.write(kMagic, 4);
  put_u32(os, kCheckpointVersion);
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : c.tensors) os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
  if (!os) throw Error(ErrorKind::IoError, "write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::CheckpointMissing, "cannot open '" + path.string() + "'");
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t manifest_len = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  is.read(reinterpret_cast<char*>(&manifest_len), sizeof manifest_len);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw Error(ErrorKind::IoError, path.string() + ": not a checkpoint file");
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::VersionMismatch, fmt::format("{}: version {}, expected {}", path.string(), version, kCheckpointVersion));
  }
  std::string text(manifest_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(manifest_len));
  if (!is) throw Error(ErrorKind::IoError, path.string() + ": truncated manifest");
  const std::vector<char> blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

  Container c;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "kind") {
      ls >> c.kind;
    } else if (tag == "meta") {
      std::string key;
      ls >> key;
      std::string value;
      std::getline(ls, value);
      if (!value.empty() && value.front() == ' ') value.erase(0, 1);
      c.meta[key] = value;
    } else if (tag == "tensor") {
      TensorRecord t;
      std::string shape, crc_hex;
      std::uint64_t offset = 0, length = 0;
      ls >> t.name >> t.dtype >> shape >> offset >> length >> crc_hex;
      if (!ls) throw Error(ErrorKind::IoError, path.string() + ": malformed manifest line '" + line + "'");
      t.shape = parse_shape(shape);
      const std::size_t width = t.dtype == "f64" || t.dtype == "i64" ? 8 : 0;
      if (width == 0 || element_count(t.shape) * width != length) {
        throw Error(ErrorKind::IoError, path.string() + ": inconsistent tensor entry '" + t.name + "'");
      }
      if (offset + length > blob.size()) throw Error(ErrorKind::IoError, path.string() + ": truncated blob at '" + t.name + "'");
      t.bytes.assign(blob.begin() + static_cast<std::ptrdiff_t>(offset),
                     blob.begin() + static_cast<std::ptrdiff_t>(offset + length));
      if (crc32(t.bytes) != static_cast<std::uint32_t>(std::stoul(crc_hex, nullptr, 16))) {
        throw Error(ErrorKind::ChecksumMismatch, path.string() + ": checksum mismatch in '" + t.name + "'");
      }
      c.tensors.push_back(std::move(t));
    } else if (!tag.empty()) {
      throw Error(ErrorKind::IoError, path.string() + ": unknown manifest tag '" + tag + "'");
    }
  }
  return c;
}

std::size_t expected_tensor_count(const ModelConfig& c) {
  const std::size_t n_linear = c.arch == ArchKind::Mlp ? c.widths.size() - 1 : c.n_blocks * GatedModel::kPerBlock;
  const bool lowrank = c.method == Method::Lora || (c.method == Method::Gates && c.lowrank_rank > 0);
  std::size_t per = 4 + (lowrank ? 2 : 0);  // w0, bias, mu_r, mu_c
  std::size_t n = n_linear * per + 2;       // + head
  if (c.arch == ArchKind::Transformer) n += 2 + 2 * (2 * c.n_blocks + 1);
  return n;
}

void save_checkpoint(const GatedModel& m, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra_meta) {
  Container c;
  c.kind = "model";
  for (const auto& [k, v] : m.config.to_map()) c.meta["config." + k] = v;
  for (const auto& [k, v] : extra_meta) c.meta[k] = v;
  for (const auto& l : m.linears) {
    c.tensors.push_back(f64_tensor(l.name + ".w0", {l.w0.rows(), l.w0.cols()}, l.w0.values()));
    c.tensors.push_back(f64_tensor(l.name + ".bias", {l.bias.size()}, l.bias));
    c.tensors.push_back(f64_tensor(l.name + ".mu_r", {l.gate_r.size()}, l.gate_r.mu));
    c.tensors.push_back(f64_tensor(l.name + ".mu_c", {l.gate_c.size()}, l.gate_c.mu));
    if (l.lowrank) {
      const auto& a = l.lowrank->a;
      const auto& b = l.lowrank->b;
      c.tensors.push_back(f64_tensor(l.name + ".lowrank_a", {a.rows(), a.cols()}, a.values()));
      c.tensors.push_back(f64_tensor(l.name + ".lowrank_b", {b.rows(), b.cols()}, b.values()));
    }
  }
  if (m.config.arch == ArchKind::Transformer) {
    const auto& te = m.token_embedding;
    const auto& pe = m.position_embedding;
    c.tensors.push_back(f64_tensor("embed.token", {te.rows(), te.cols()}, te.values()));
    c.tensors.push_back(f64_tensor("embed.position", {pe.rows(), pe.cols()}, pe.values()));
    for (std::size_t i = 0; i < m.norms.size(); ++i) {
      c.tensors.push_back(f64_tensor(fmt::format("norm.{}.gamma", i), {m.norms[i].gamma.size()}, m.norms[i].gamma));
      c.tensors.push_back(f64_tensor(fmt::format("norm.{}.beta", i), {m.norms[i].beta.size()}, m.norms[i].beta));
    }
  }
  c.tensors.push_back(f64_tensor("head.w", {m.head.w.rows(), m.head.w.cols()}, m.head.w.values()));
  c.tensors.push_back(f64_tensor("head.b", {m.head.b.size()}, m.head.b));
  write_container(c, path);
}

GatedModel load_checkpoint(const std::filesystem::path& path, std::map<std::string, std::string>* extra_meta) {
  const Container c = read_container(path);
  if (c.kind != "model") throw Error(ErrorKind::IoError, path.string() + ": container kind '" + c.kind + "' is not a model");
  std::map<std::string, std::string> cfg;
  for (const auto& [k, v] : c.meta) {
    if (k.rfind("config.", 0) == 0) {
      cfg[k.substr(7)] = v;
    } else if (extra_meta) {
      (*extra_meta)[k] = v;
    }
  }
  GatedModel m = build_model(ModelConfig::from_map(cfg));
  if (c.tensors.size() != expected_tensor_count(m.config)) {
    throw Error(ErrorKind::IoError, fmt::format("{}: {} tensors, arch expects {}", path.string(), c.tensors.size(),
                                                expected_tensor_count(m.config)));
  }
  for (auto& l : m.linears) {
    l.w0 = matrix_from(c, l.name + ".w0", l.w0.rows(), l.w0.cols());
    l.bias = vector_from(c, l.name + ".bias", l.bias.size());
    l.gate_r.mu = vector_from(c, l.name + ".mu_r", l.gate_r.size());
    l.gate_c.mu = vector_from(c, l.name + ".mu_c", l.gate_c.size());
    if (l.lowrank) {
      l.lowrank->a = matrix_from(c, l.name + ".lowrank_a", l.lowrank->a.rows(), l.lowrank->a.cols());
      l.lowrank->b = matrix_from(c, l.name + ".lowrank_b", l.lowrank->b.rows(), l.lowrank->b.cols());
    }
  }
  if (m.config.arch == ArchKind::Transformer) {
    m.token_embedding = matrix_from(c, "embed.token", m.token_embedding.rows(), m.token_embedding.cols());
    m.position_embedding = matrix_from(c, "embed.position", m.position_embedding.rows(), m.position_embedding.cols());
    for (std::size_t i = 0; i < m.norms.size(); ++i) {
      m.norms[i].gamma = vector_from(c, fmt::format("norm.{}.gamma", i), m.norms[i].gamma.size());
      m.norms[i].beta = vector_from(c, fmt::format("norm.{}.beta", i), m.norms[i].beta.size());
    }
  }
  m.head.w = matrix_from(c, "head.w", m.head.w.rows(), m.head.w.cols());
  m.head.b = vector_from(c, "head.b", m.head.b.size());
  return m;
}

}  // namespace finegates::model
