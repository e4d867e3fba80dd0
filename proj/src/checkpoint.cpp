#include "cma/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include "cma/errors.hpp"

namespace cma {

static_assert(std::endian::native == std::endian::little,
              "CMA1 I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'M', 'A', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  bool at_end() const { return pos_ == bytes_.size(); }

  template <typename T>
  T get(const char* what) {
    T value;
    read(&value, sizeof(T), what);
    return value;
  }

  void read(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw TruncatedFile(std::string("checkpoint truncated while reading ") + what);
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || vocab_size < 1 || max_positions < 1) {
    throw FormatError("model config fields must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw FormatError("d_model (" + std::to_string(d_model) + ") is not divisible by n_heads (" +
                      std::to_string(n_heads) + ")");
  }
}

std::vector<std::pair<std::string, Shape>> shape_table(const ModelConfig& c) {
  c.validate();
  const std::size_t k = c.d_model;
  std::vector<std::pair<std::string, Shape>> table = {
      {"wte", {c.vocab_size, k}},
      {"wpe", {c.max_positions, k}},
      {"ln_f.weight", {k}},
      {"ln_f.bias", {k}},
  };
  for (std::uint32_t b = 0; b < c.n_layers; ++b) {
    const std::string p = "h." + std::to_string(b) + ".";
    table.push_back({p + "ln_1.weight", {k}});
    table.push_back({p + "ln_1.bias", {k}});
    table.push_back({p + "attn.c_attn.weight", {k, 3 * k}});
    table.push_back({p + "attn.c_attn.bias", {3 * k}});
    table.push_back({p + "attn.c_proj.weight", {k, k}});
    table.push_back({p + "attn.c_proj.bias", {k}});
    table.push_back({p + "ln_2.weight", {k}});
    table.push_back({p + "ln_2.bias", {k}});
    table.push_back({p + "mlp.c_fc.weight", {k, c.d_ff}});
    table.push_back({p + "mlp.c_fc.bias", {c.d_ff}});
    table.push_back({p + "mlp.c_proj.weight", {c.d_ff, k}});
    table.push_back({p + "mlp.c_proj.bias", {k}});
  }
  std::sort(table.begin(), table.end());
  return table;
}

const Tensor& Checkpoint::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ShapeMismatch(name, "present", "absent");
  return it->second;
}

void Checkpoint::validate() const {
  const auto table = shape_table(config);
  for (const auto& [name, shape] : table) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeMismatch(name, shape_to_string(shape), "absent");
    if (it->second.shape() != shape) {
      throw ShapeMismatch(name, shape_to_string(shape), shape_to_string(it->second.shape()));
    }
  }
  if (tensors.size() != table.size()) {
    for (const auto& [name, tensor] : tensors) {
      const bool known = std::any_of(table.begin(), table.end(),
                                     [&](const auto& entry) { return entry.first == name; });
      if (!known) throw ShapeMismatch(name, "absent", shape_to_string(tensor.shape()));
    }
  }
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.tensors.empty()) throw FormatError("refusing to save a checkpoint without tensors");
  ckpt.validate();
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put(out, kVersion);
  const auto& c = ckpt.config;
  for (std::uint32_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_positions}) {
    put(out, v);
  }
  for (const auto& [name, tensor] : ckpt.tensors) {  // std::map: sorted by name
    put(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put(out, static_cast<std::uint32_t>(tensor.rank()));
    for (std::size_t d : tensor.shape()) put(out, static_cast<std::uint64_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(tensor.data().data());
    out.insert(out.end(), p, p + tensor.numel() * sizeof(float));
  }
  return out;
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagic("not a CMA1 checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion) {
    throw UnsupportedVersion("unsupported CMA1 version " + std::to_string(version));
  }
  Checkpoint ckpt;
  auto& c = ckpt.config;
  for (std::uint32_t* field : {&c.n_layers, &c.n_heads, &c.d_model, &c.d_ff, &c.vocab_size, &c.max_positions}) {
    *field = r.get<std::uint32_t>("config");
  }
  c.validate();
  const auto table = shape_table(c);

  while (!r.at_end()) {
    const auto name_len = r.get<std::uint32_t>("tensor name length");
    if (name_len > bytes.size()) throw TruncatedFile("checkpoint truncated while reading tensor name");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank == 0 || rank > 8) throw ShapeMismatch(name, "rank 1..8", "rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      const auto dim = r.get<std::uint64_t>("tensor dims");
      if (dim == 0 || dim > bytes.size()) throw ShapeMismatch(name, "positive dims", "dim " + std::to_string(dim));
      d = static_cast<std::size_t>(dim);
      numel *= dim;
      if (numel > bytes.size()) throw TruncatedFile("checkpoint truncated in tensor '" + name + "'");
    }
    auto expected = std::find_if(table.begin(), table.end(), [&](const auto& e) { return e.first == name; });
    if (expected == table.end()) throw ShapeMismatch(name, "absent", shape_to_string(shape));
    if (expected->second != shape) {
      throw ShapeMismatch(name, shape_to_string(expected->second), shape_to_string(shape));
    }
    std::vector<float> data(numel);
    r.read(data.data(), numel * sizeof(float), "tensor data");
    if (!ckpt.tensors.emplace(name, Tensor(shape, std::move(data))).second) {
      throw FormatError("tensor '" + name + "' appears twice");
    }
  }
  ckpt.validate();
  return ckpt;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for checkpoint " + path.string());
}

Checkpoint init_random(const ModelConfig& config, std::uint64_t seed, double stddev) {
  std::mt19937_64 engine(seed);
  auto uniform = [&] {  // (0, 1]
    return (static_cast<double>(engine() >> 11) + 1.0) * 0x1.0p-53;
  };
  bool have_spare = false;
  double spare = 0.0;
  auto normal = [&] {
    if (have_spare) {
      have_spare = false;
      return spare;
    }
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    spare = r * std::sin(theta);
    have_spare = true;
    return r * std::cos(theta);
  };

  Checkpoint ckpt;
  ckpt.config = config;
  for (const auto& [name, shape] : shape_table(config)) {
    Tensor t(shape);
    if (name.ends_with(".bias")) {
      // zero
    } else if (name.find("ln_") != std::string::npos) {
      std::fill(t.data().begin(), t.data().end(), 1.0f);
    } else {
      for (float& v : t.data()) v = static_cast<float>(stddev * normal());
    }
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

}  // namespace cma
