#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "p2r/tensor.hpp"

namespace p2r {

struct MoEConfig {
  int n_experts = 0;      // 0 disables the MoE path (dense FFN)
  int n_prototypes = 1;   // expert groups; one expert is picked per group
  int n_shards = 1;       // logical devices the experts are partitioned over
  float capacity_factor = 1.25f;

  bool enabled() const { return n_experts > 0; }
  int group_size() const { return n_experts / n_prototypes; }
  void validate() const;
};

// Architectural hyperparameters plus the sharing mode. n_layers_graph is the
// computation-graph depth L; n_layers_params is the number of distinct
// parameterized layers and must be 1 (shared) or L (unshared).
struct ModelConfig {
  int d_model = 128;
  int d_ff = 512;
  int n_layers_graph = 8;
  int n_layers_params = 8;
  int n_heads = 4;
  int vocab_size = 260;
  int seq_len = 64;
  MoEConfig moe;

  bool shared() const { return n_layers_params == 1 && n_layers_graph > 1; }
  void validate() const;
  ModelConfig as_shared() const;
  ModelConfig as_unshared() const;
};

struct ParamCounts {
  std::int64_t embedding_params = 0;  // token + position embeddings + final norm
  std::int64_t per_layer_params = 0;
  std::int64_t total_params = 0;
};

// Closed-form parameter count for a config (token embedding is tied to the
// output head, so it is counted once).
ParamCounts count_params(const ModelConfig& config);

struct ExpertParams {
  Tensor w1, b1, w2, b2;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, wk, wv, wo;
  Tensor ln2_gain, ln2_bias;
  // Dense FFN (undefined when the layer is MoE).
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  // MoE sublayer (undefined when dense).
  Tensor gate;
  std::vector<ExpertParams> experts;

  // Visits every defined tensor with its relative name ("attn.wq", ...).
  void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
};

enum class AttentionMode { Causal, Full };

// Routing assignment produced by moe_dispatch: one expert per prototype group
// for every token, with per-expert load capped at
// capacity_factor * tokens / group_size (overflow tokens are dropped).
struct Routing {
  int n_tokens = 0;
  int k = 0;                                  // = n_prototypes
  std::vector<int> selected;                  // [n_tokens * k] expert ids
  std::vector<std::uint8_t> survived;         // [n_tokens * k] 0 = dropped by capacity
  std::vector<std::vector<int>> expert_rows;  // per expert: served token rows, in token order
  std::vector<std::vector<int>> expert_slots; // per expert: the group slot of each served row
  std::vector<int> raw_load;                  // per expert: selections before capacity
  int capacity = 0;
  int dropped = 0;
};

Routing moe_dispatch(const Tensor& gating_logits, const MoEConfig& moe);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Plain inference forward: logits [batch*seq, vocab]. Token count must be
  // batch * seq with seq <= config.seq_len.
  Tensor forward(std::span<const int> tokens, int batch, AttentionMode mode) const;

  // Segmented forward used by the training loop (and for activation
  // recomputation): embeddings, one transformer block, and the tied head.
  Tensor embed_forward(GradTape* tape, std::span<const int> tokens, int batch) const;
  Tensor block_forward(GradTape* tape, int graph_layer, const Tensor& x, int batch,
                       AttentionMode mode) const;
  Tensor head_forward(GradTape* tape, const Tensor& x) const;

  int n_graph_layers() const { return config_.n_layers_graph; }
  int n_owned_layers() const { return static_cast<int>(owned_layers_.size()); }
  // Parameters seen by graph layer g (a shared proxy when sharing is on).
  const LayerParams& graph_layer(int g) const;
  LayerParams& owned_layer(int i) { return owned_layers_[static_cast<std::size_t>(i)]; }
  const LayerParams& owned_layer(int i) const { return owned_layers_[static_cast<std::size_t>(i)]; }
  int owned_index_of_graph_layer(int g) const { return config_.shared() ? 0 : g; }

  Tensor& token_embedding() { return tok_embed_; }
  Tensor& position_embedding() { return pos_embed_; }

  // Visits every owned parameter as (name, tensor): embeddings, final norm,
  // and each owned layer under "layer.<i>.".
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  void zero_grads();

  // Shared mode only: adds the scratch gradient buffer (the current graph
  // layer's contribution) into the shared accumulator and clears the scratch.
  // No-op when unshared.
  void flush_shared_layer_grads();
  // Total bytes of the shared-mode scratch gradient buffers (0 when unshared).
  std::int64_t scratch_grad_bytes() const;

  // Expert -> shard assignment (contiguous blocks). Forward output does not
  // depend on the assignment; it is placement bookkeeping.
  int expert_shard(int expert) const;
  std::vector<std::vector<int>> shard_layout() const;  // shard -> expert ids
  void redistribute_experts(int new_n_shards);

  // Unshared deep copy: every graph layer gets its own copy of the (single)
  // shared layer's parameters. Embeddings are copied directly.
  Model delinked() const;

 private:
  void allocate(std::uint64_t seed);
  Tensor ffn_forward(GradTape* tape, const LayerParams& p, const Tensor& x) const;
  Tensor moe_forward(GradTape* tape, const LayerParams& p, const Tensor& x) const;

  ModelConfig config_;
  Tensor tok_embed_, pos_embed_;
  Tensor final_gain_, final_bias_;
  std::vector<LayerParams> owned_layers_;
  // Shared mode: per-graph-layer views of owned_layers_[0] whose grads alias
  // one scratch buffer set; flush_shared_layer_grads moves scratch into the
  // owned accumulator after each layer's backward.
  std::vector<LayerParams> graph_views_;
  std::vector<std::shared_ptr<std::vector<float>>> scratch_grads_;
};

// Free-function spellings for the operations above.
Model build_model(const ModelConfig& config, std::uint64_t seed);
Model redistribute_experts(const Model& model, int new_n_shards);

}  // namespace p2r
