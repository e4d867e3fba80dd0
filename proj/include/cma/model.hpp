#pragma once

#include <compare>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cma/checkpoint.hpp"
#include "cma/tensor.hpp"
#include "cma/tokenizer.hpp"

namespace cma {

enum class MediatorKind { neuron, attention_head };

// Identity of a mediator, independent of token position.
//   neuron:         layer in [0, n_layers] (0 = embedding output), index = k
//   attention_head: layer in [1, n_layers], index = head
struct MediatorCoord {
  MediatorKind kind = MediatorKind::neuron;
  int layer = 0;
  int index = 0;

  auto operator<=>(const MediatorCoord&) const = default;
};

std::string to_string(const MediatorCoord& coord);

struct NeuronOverride {
  int layer = 0;
  int position = 0;
  int neuron = 0;
  float value = 0.0f;
};

// Replaces the post-softmax attention row of `head` at query `position`.
// `row` covers the causal support, so its length is position + 1.
struct AttentionOverride {
  int layer = 1;
  int head = 0;
  int position = 0;
  std::vector<float> row;
};

// A do-operation on mediators: a set of values forced into a forward pass.
class InterventionSpec {
 public:
  InterventionSpec& set_neuron(int layer, int position, int neuron, float value);
  InterventionSpec& set_attention_row(int layer, int head, int position, std::vector<float> row);

  bool empty() const noexcept { return neurons_.empty() && attention_.empty(); }
  const std::vector<NeuronOverride>& neurons() const noexcept { return neurons_; }
  const std::vector<AttentionOverride>& attention() const noexcept { return attention_; }

  // Bounds, duplicates, row lengths and row sums (1 +- 1e-5).
  void validate(const ModelConfig& config, std::size_t n_positions) const;

 private:
  std::vector<NeuronOverride> neurons_;
  std::vector<AttentionOverride> attention_;
};

// Mediator values observed in one forward pass (after any patching).
struct Trace {
  std::vector<Tensor> activations;  // n_layers + 1 entries, each [positions, K]
  std::vector<Tensor> attentions;   // n_layers entries (layer l at l - 1), each [heads, positions, positions]
  std::vector<float> last_logits;   // logits at the final position

  std::size_t positions() const { return activations.front().dim(0); }
  float neuron(int layer, int position, int neuron) const;
  std::span<const float> attention_row(int layer, int head, int position) const;
};

// Copies the traced values of `mediators` at `position` into an intervention.
InterventionSpec spec_from_trace(const Trace& trace, std::span<const MediatorCoord> mediators,
                                 int position);
// Appends the same overrides to an existing spec.
void append_from_trace(InterventionSpec& spec, const Trace& trace,
                       std::span<const MediatorCoord> mediators, int position);

struct ForwardResult {
  std::vector<double> probs;  // next-token distribution after the last position
  std::optional<Trace> trace;
};

// GPT2 forward pass bound to a checkpoint. The checkpoint must outlive the
// model. All methods are const and keep their buffers local, so one Model can
// serve any number of threads.
class Model {
 public:
  explicit Model(const Checkpoint& ckpt);

  const ModelConfig& config() const noexcept { return config_; }

  ForwardResult forward(std::span<const TokenId> ids, const InterventionSpec& spec = {},
                        bool record = false) const;

  // Next-token distributions after each listed position, from one pass.
  std::vector<std::vector<double>> next_token_probs(std::span<const TokenId> ids,
                                                    std::span<const int> positions,
                                                    const InterventionSpec& spec = {}) const;

  // Teacher-forced log-probabilities of each continuation token. Overrides in
  // `spec` keep their absolute positions while the continuation is appended.
  std::vector<double> sequence_log_prob(std::span<const TokenId> prompt,
                                        std::span<const TokenId> continuation,
                                        const InterventionSpec& spec = {}) const;

 private:
  struct Block {
    const Tensor* ln1_w;
    const Tensor* ln1_b;
    const Tensor* attn_w;
    const Tensor* attn_b;
    const Tensor* proj_w;
    const Tensor* proj_b;
    const Tensor* ln2_w;
    const Tensor* ln2_b;
    const Tensor* fc_w;
    const Tensor* fc_b;
    const Tensor* mproj_w;
    const Tensor* mproj_b;
  };

  // Runs the stack; returns log-softmax rows for `logit_positions`.
  std::vector<std::vector<double>> run(std::span<const TokenId> ids, const InterventionSpec& spec,
                                       std::span<const int> logit_positions, Trace* trace) const;

  ModelConfig config_;
  const Tensor* wte_;
  const Tensor* wpe_;
  const Tensor* lnf_w_;
  const Tensor* lnf_b_;
  std::vector<Block> blocks_;
};

}  // namespace cma
