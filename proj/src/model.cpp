#include "cma/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

#include "cma/errors.hpp"

namespace cma {

std::string to_string(const MediatorCoord& coord) {
  return std::string(coord.kind == MediatorKind::neuron ? "neuron" : "head") + "(" +
         std::to_string(coord.layer) + "," + std::to_string(coord.index) + ")";
}

InterventionSpec& InterventionSpec::set_neuron(int layer, int position, int neuron, float value) {
  neurons_.push_back({layer, position, neuron, value});
  return *this;
}

InterventionSpec& InterventionSpec::set_attention_row(int layer, int head, int position,
                                                      std::vector<float> row) {
  attention_.push_back({layer, head, position, std::move(row)});
  return *this;
}

void InterventionSpec::validate(const ModelConfig& config, std::size_t n_positions) const {
  const int n = static_cast<int>(n_positions);
  std::set<std::tuple<int, int, int>> seen;
  for (const auto& o : neurons_) {
    if (o.layer < 0 || o.layer > static_cast<int>(config.n_layers) || o.position < 0 ||
        o.position >= n || o.neuron < 0 || o.neuron >= static_cast<int>(config.d_model)) {
      throw InterventionError("neuron override out of bounds: layer " + std::to_string(o.layer) +
                              ", position " + std::to_string(o.position) + ", neuron " +
                              std::to_string(o.neuron));
    }
    if (!std::isfinite(o.value)) throw InterventionError("neuron override value is not finite");
    if (!seen.insert({o.layer, o.position, o.neuron}).second) {
      throw InterventionError("duplicate neuron override at layer " + std::to_string(o.layer) +
                              ", position " + std::to_string(o.position) + ", neuron " +
                              std::to_string(o.neuron));
    }
  }
  seen.clear();
  for (const auto& o : attention_) {
    if (o.layer < 1 || o.layer > static_cast<int>(config.n_layers) || o.head < 0 ||
        o.head >= static_cast<int>(config.n_heads) || o.position < 0 || o.position >= n) {
      throw InterventionError("attention override out of bounds: layer " + std::to_string(o.layer) +
                              ", head " + std::to_string(o.head) + ", position " +
                              std::to_string(o.position));
    }
    if (o.row.size() != static_cast<std::size_t>(o.position) + 1) {
      throw InterventionError("attention override row for position " + std::to_string(o.position) +
                              " must have " + std::to_string(o.position + 1) + " entries");
    }
    double sum = 0.0;
    for (float v : o.row) {
      if (!std::isfinite(v) || v < 0.0f) throw InterventionError("attention override row has invalid weight");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-5) {
      throw InterventionError("attention override row sums to " + std::to_string(sum));
    }
    if (!seen.insert({o.layer, o.head, o.position}).second) {
      throw InterventionError("duplicate attention override at layer " + std::to_string(o.layer) +
                              ", head " + std::to_string(o.head));
    }
  }
}

float Trace::neuron(int layer, int position, int neuron) const {
  return activations.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(position),
                                                            static_cast<std::size_t>(neuron));
}

std::span<const float> Trace::attention_row(int layer, int head, int position) const {
  const Tensor& a = attentions.at(static_cast<std::size_t>(layer - 1));
  const std::size_t n = a.dim(1);
  return a.row(static_cast<std::size_t>(head) * n + static_cast<std::size_t>(position))
      .first(static_cast<std::size_t>(position) + 1);
}

void append_from_trace(InterventionSpec& spec, const Trace& trace,
                       std::span<const MediatorCoord> mediators, int position) {
  for (const auto& m : mediators) {
    if (m.kind == MediatorKind::neuron) {
      spec.set_neuron(m.layer, position, m.index, trace.neuron(m.layer, position, m.index));
    } else {
      auto row = trace.attention_row(m.layer, m.index, position);
      spec.set_attention_row(m.layer, m.index, position, {row.begin(), row.end()});
    }
  }
}

InterventionSpec spec_from_trace(const Trace& trace, std::span<const MediatorCoord> mediators,
                                 int position) {
  InterventionSpec spec;
  append_from_trace(spec, trace, mediators, position);
  return spec;
}

Model::Model(const Checkpoint& ckpt) : config_(ckpt.config) {
  ckpt.validate();
  wte_ = &ckpt.get("wte");
  wpe_ = &ckpt.get("wpe");
  lnf_w_ = &ckpt.get("ln_f.weight");
  lnf_b_ = &ckpt.get("ln_f.bias");
  for (std::uint32_t b = 0; b < config_.n_layers; ++b) {
    const std::string p = "h." + std::to_string(b) + ".";
    blocks_.push_back({&ckpt.get(p + "ln_1.weight"), &ckpt.get(p + "ln_1.bias"),
                       &ckpt.get(p + "attn.c_attn.weight"), &ckpt.get(p + "attn.c_attn.bias"),
                       &ckpt.get(p + "attn.c_proj.weight"), &ckpt.get(p + "attn.c_proj.bias"),
                       &ckpt.get(p + "ln_2.weight"), &ckpt.get(p + "ln_2.bias"),
                       &ckpt.get(p + "mlp.c_fc.weight"), &ckpt.get(p + "mlp.c_fc.bias"),
                       &ckpt.get(p + "mlp.c_proj.weight"), &ckpt.get(p + "mlp.c_proj.bias")});
  }
}

namespace {

std::vector<double> log_softmax(std::span<const float> logits) {
  const float max = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (float v : logits) sum += std::exp(static_cast<double>(v) - max);
  const double log_sum = std::log(sum);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = (static_cast<double>(logits[i]) - max) - log_sum;
  return out;
}

std::vector<double> probabilities(std::span<const float> logits) {
  const float max = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(static_cast<double>(logits[i]) - max);
    sum += out[i];
  }
  for (double& p : out) p /= sum;
  return out;
}

}  // namespace

std::vector<std::vector<double>> Model::run(std::span<const TokenId> ids, const InterventionSpec& spec,
                                            std::span<const int> logit_positions, Trace* trace) const {
  const std::size_t n = ids.size();
  if (n == 0) throw InterventionError("forward pass needs at least one token");
  if (n > config_.max_positions) {
    throw InterventionError("prompt of " + std::to_string(n) + " tokens exceeds max_positions " +
                            std::to_string(config_.max_positions));
  }
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::uint32_t>(id) >= config_.vocab_size) {
      throw InterventionError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
  for (int p : logit_positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= n) throw InterventionError("logit position out of range");
  }
  spec.validate(config_, n);

  const std::size_t K = config_.d_model;
  const std::size_t H = config_.n_heads;
  const std::size_t L = config_.n_layers;
  const std::size_t d = config_.head_dim();

  std::vector<std::vector<const NeuronOverride*>> neuron_patches(L + 1);
  for (const auto& o : spec.neurons()) neuron_patches[static_cast<std::size_t>(o.layer)].push_back(&o);
  std::vector<std::vector<const std::vector<float>*>> attention_patches;
  if (!spec.attention().empty()) {
    attention_patches.assign(L, std::vector<const std::vector<float>*>(H * n, nullptr));
    for (const auto& o : spec.attention()) {
      attention_patches[static_cast<std::size_t>(o.layer - 1)]
                       [static_cast<std::size_t>(o.head) * n + static_cast<std::size_t>(o.position)] = &o.row;
    }
  }
  auto patch_neurons = [&](Tensor& x, std::size_t layer) {
    for (const auto* o : neuron_patches[layer]) {
      x.at(static_cast<std::size_t>(o->position), static_cast<std::size_t>(o->neuron)) = o->value;
    }
  };

  Tensor x({n, K});
  for (std::size_t i = 0; i < n; ++i) {
    auto e = wte_->row(static_cast<std::size_t>(ids[i]));
    auto p = wpe_->row(i);
    auto r = x.row(i);
    for (std::size_t j = 0; j < K; ++j) r[j] = e[j] + p[j];
  }
  patch_neurons(x, 0);
  if (trace) {
    trace->activations.clear();
    trace->attentions.clear();
    trace->activations.push_back(x);
  }

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> scores(n);
  std::vector<double> acc(d);
  for (std::size_t b = 0; b < L; ++b) {
    const Block& blk = blocks_[b];
    Tensor qkv = matmul(layer_norm(x, *blk.ln1_w, *blk.ln1_b), *blk.attn_w);
    add_bias_inplace(qkv, *blk.attn_b);

    Tensor att({H, n, n});
    Tensor mixed({n, K});
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t i = 0; i < n; ++i) {
        auto q = qkv.row(i).subspan(h * d, d);
        auto row = att.row(h * n + i);
        const std::vector<float>* forced =
            attention_patches.empty() ? nullptr : attention_patches[b][h * n + i];
        if (forced) {
          std::copy(forced->begin(), forced->end(), row.begin());
        } else {
          double max = -INFINITY;
          for (std::size_t j = 0; j <= i; ++j) {
            auto k = qkv.row(j).subspan(K + h * d, d);
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += static_cast<double>(q[c]) * k[c];
            scores[j] = dot * scale;
            max = std::max(max, scores[j]);
          }
          double sum = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            scores[j] = std::exp(scores[j] - max);
            sum += scores[j];
          }
          for (std::size_t j = 0; j <= i; ++j) row[j] = static_cast<float>(scores[j] / sum);
        }
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          const double w = row[j];
          auto v = qkv.row(j).subspan(2 * K + h * d, d);
          for (std::size_t c = 0; c < d; ++c) acc[c] += w * v[c];
        }
        auto out = mixed.row(i).subspan(h * d, d);
        for (std::size_t c = 0; c < d; ++c) out[c] = static_cast<float>(acc[c]);
      }
    }
    Tensor attn_out = matmul(mixed, *blk.proj_w);
    add_bias_inplace(attn_out, *blk.proj_b);
    for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] += attn_out.data()[i];

    Tensor hidden = matmul(layer_norm(x, *blk.ln2_w, *blk.ln2_b), *blk.fc_w);
    add_bias_inplace(hidden, *blk.fc_b);
    for (float& v : hidden.data()) v = gelu(v);
    Tensor mlp_out = matmul(hidden, *blk.mproj_w);
    add_bias_inplace(mlp_out, *blk.mproj_b);
    for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] += mlp_out.data()[i];

    patch_neurons(x, b + 1);
    if (trace) {
      trace->activations.push_back(x);
      trace->attentions.push_back(std::move(att));
    }
  }

  auto logits_at = [&](int position) {
    Tensor h({1, K}, {x.row(static_cast<std::size_t>(position)).begin(),
                      x.row(static_cast<std::size_t>(position)).end()});
    Tensor logits = matmul_transposed(layer_norm(h, *lnf_w_, *lnf_b_), *wte_);
    return std::vector<float>(logits.data().begin(), logits.data().end());
  };

  std::vector<std::vector<double>> out;
  out.reserve(logit_positions.size());
  for (int p : logit_positions) {
    const auto logits = logits_at(p);
    out.push_back(log_softmax(logits));
    if (trace && static_cast<std::size_t>(p) + 1 == n) trace->last_logits = logits;
  }
  if (trace && trace->last_logits.empty()) trace->last_logits = logits_at(static_cast<int>(n) - 1);
  return out;
}

ForwardResult Model::forward(std::span<const TokenId> ids, const InterventionSpec& spec, bool record) const {
  ForwardResult result;
  Trace trace;
  // Probabilities come straight from the raw last-position logits.
  run(ids, spec, {}, &trace);
  result.probs = probabilities(trace.last_logits);
  if (record) result.trace = std::move(trace);
  return result;
}

std::vector<std::vector<double>> Model::next_token_probs(std::span<const TokenId> ids,
                                                         std::span<const int> positions,
                                                         const InterventionSpec& spec) const {
  auto rows = run(ids, spec, positions, nullptr);
  for (auto& row : rows) {
    for (double& v : row) v = std::exp(v);
  }
  return rows;
}

std::vector<double> Model::sequence_log_prob(std::span<const TokenId> prompt,
                                             std::span<const TokenId> continuation,
                                             const InterventionSpec& spec) const {
  if (continuation.empty()) throw InterventionError("continuation must be non-empty");
  if (prompt.empty()) throw InterventionError("prompt must be non-empty");
  std::vector<TokenId> ids(prompt.begin(), prompt.end());
  ids.insert(ids.end(), continuation.begin(), continuation.end() - 1);
  std::vector<int> positions;
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    positions.push_back(static_cast<int>(prompt.size() + t) - 1);
  }
  const auto rows = run(ids, spec, positions, nullptr);
  std::vector<double> out;
  out.reserve(continuation.size());
  for (std::size_t t = 0; t < continuation.size(); ++t) {
    const TokenId tok = continuation[t];
    if (tok < 0 || static_cast<std::uint32_t>(tok) >= config_.vocab_size) {
      throw InterventionError("continuation token outside vocabulary");
    }
    out.push_back(rows[t][static_cast<std::size_t>(tok)]);
  }
  return out;
}

}  // namespace cma
