#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cma/tensor.hpp"

namespace cma {

struct ModelConfig {
  std::uint32_t n_layers = 1;
  std::uint32_t n_heads = 1;
  std::uint32_t d_model = 1;
  std::uint32_t d_ff = 1;
  std::uint32_t vocab_size = 1;
  std::uint32_t max_positions = 1;

  std::uint32_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Tensor names and shapes required by a GPT2-style model, sorted by name.
// Shared by checkpoint validation and the model's weight binding.
//
// Names follow the GPT2 reference layout with 0-based block indices; linear
// weights are stored [in, out] so activations multiply them from the left:
//   wte [vocab, K], wpe [positions, K], ln_f.{weight,bias} [K],
//   h.<b>.ln_1.*, h.<b>.ln_2.* [K], h.<b>.attn.c_attn.weight [K, 3K] (q|k|v),
//   h.<b>.attn.c_proj.weight [K, K], h.<b>.mlp.c_fc.weight [K, d_ff],
//   h.<b>.mlp.c_proj.weight [d_ff, K], plus matching biases.
// The output projection is tied to wte.
std::vector<std::pair<std::string, Shape>> shape_table(const ModelConfig& config);

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  const Tensor& get(const std::string& name) const;
  // Throws ShapeMismatch on any missing, extra, or mis-shaped tensor.
  void validate() const;
};

// CMA1 layout, little-endian:
//   "CMA1" | u32 version (=1) | u32 n_layers, n_heads, d_model, d_ff,
//   vocab_size, max_positions | per tensor, sorted by name:
//   u32 name_len | name bytes | u32 rank | rank x u64 dims | f32 data
Checkpoint load_checkpoint(const std::filesystem::path& path);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

// Weights and embeddings ~ Normal(0, stddev), biases 0, layer-norm gain 1.
// Draws come from std::mt19937_64 through a Box-Muller transform, tensor by
// tensor in shape-table order, so a seed pins every bit on any platform.
Checkpoint init_random(const ModelConfig& config, std::uint64_t seed, double stddev = 0.02);

}  // namespace cma
