#include "p2r/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace p2r {

namespace {

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t z = seed ^ fnv1a(name);
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

Tensor init_normal(std::vector<int> shape, std::uint64_t seed, std::string_view name,
                   float stddev = 0.02f) {
  Tensor t = Tensor::zeros(std::move(shape), /*requires_grad=*/true);
  std::mt19937_64 rng(mix_seed(seed, name));
  std::normal_distribution<float> dist(0.0f, stddev);
  float* p = t.data();
  for (std::size_t i = 0; i < t.numel(); ++i) p[i] = dist(rng);
  return t;
}

}  // namespace

void MoEConfig::validate() const {
  if (!enabled()) return;
  if (n_prototypes <= 0 || n_experts % n_prototypes != 0)
    throw std::invalid_argument("moe config: n_experts must be divisible by n_prototypes");
  if (n_shards <= 0 || n_experts % n_shards != 0)
    throw std::invalid_argument("moe config: n_experts must be divisible by n_shards");
  if (!(capacity_factor > 0.0f))
    throw std::invalid_argument("moe config: capacity_factor must be positive");
}

void ModelConfig::validate() const {
  if (d_model <= 0 || d_ff <= 0 || n_layers_graph <= 0 || n_heads <= 0 || vocab_size <= 0 ||
      seq_len <= 0)
    throw std::invalid_argument("model config: dimensions must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("model config: d_model must be divisible by n_heads");
  if (n_layers_params != 1 && n_layers_params != n_layers_graph)
    throw std::invalid_argument("model config: n_layers_params must be 1 or n_layers_graph");
  moe.validate();
}

ModelConfig ModelConfig::as_shared() const {
  ModelConfig c = *this;
  c.n_layers_params = 1;
  return c;
}

ModelConfig ModelConfig::as_unshared() const {
  ModelConfig c = *this;
  c.n_layers_params = c.n_layers_graph;
  return c;
}

ParamCounts count_params(const ModelConfig& config) {
  config.validate();
  const std::int64_t d = config.d_model;
  const std::int64_t dff = config.d_ff;
  ParamCounts out;
  out.embedding_params = static_cast<std::int64_t>(config.vocab_size) * d +
                         static_cast<std::int64_t>(config.seq_len) * d + 2 * d;
  std::int64_t layer = 4 * d * d + 4 * d;  // attention projections + two norms
  const std::int64_t ffn = d * dff + dff + dff * d + d;
  if (config.moe.enabled())
    layer += d * config.moe.n_experts + static_cast<std::int64_t>(config.moe.n_experts) * ffn;
  else
    layer += ffn;
  out.per_layer_params = layer;
  out.total_params = out.embedding_params + config.n_layers_params * layer;
  return out;
}

void LayerParams::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("ln1.gain", ln1_gain);
  fn("ln1.bias", ln1_bias);
  fn("attn.wq", wq);
  fn("attn.wk", wk);
  fn("attn.wv", wv);
  fn("attn.wo", wo);
  fn("ln2.gain", ln2_gain);
  fn("ln2.bias", ln2_bias);
  if (ffn_w1.defined()) {
    fn("ffn.w1", ffn_w1);
    fn("ffn.b1", ffn_b1);
    fn("ffn.w2", ffn_w2);
    fn("ffn.b2", ffn_b2);
  }
  if (gate.defined()) {
    fn("moe.gate", gate);
    for (std::size_t e = 0; e < experts.size(); ++e) {
      const std::string prefix = "moe.expert." + std::to_string(e) + ".";
      fn(prefix + "w1", experts[e].w1);
      fn(prefix + "b1", experts[e].b1);
      fn(prefix + "w2", experts[e].w2);
      fn(prefix + "b2", experts[e].b2);
    }
  }
}

void LayerParams::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<LayerParams*>(this)->for_each(
      [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

Model::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  allocate(seed);
}

void Model::allocate(std::uint64_t seed) {
  const int d = config_.d_model;
  tok_embed_ = init_normal({config_.vocab_size, d}, seed, "embed.tok");
  pos_embed_ = init_normal({config_.seq_len, d}, seed, "embed.pos");
  final_gain_ = Tensor::full({d}, 1.0f, true);
  final_bias_ = Tensor::zeros({d}, true);

  owned_layers_.resize(static_cast<std::size_t>(config_.n_layers_params));
  for (int i = 0; i < config_.n_layers_params; ++i) {
    const std::string prefix = "layer." + std::to_string(i) + ".";
    LayerParams& p = owned_layers_[static_cast<std::size_t>(i)];
    p.ln1_gain = Tensor::full({d}, 1.0f, true);
    p.ln1_bias = Tensor::zeros({d}, true);
    p.wq = init_normal({d, d}, seed, prefix + "attn.wq");
    p.wk = init_normal({d, d}, seed, prefix + "attn.wk");
    p.wv = init_normal({d, d}, seed, prefix + "attn.wv");
    p.wo = init_normal({d, d}, seed, prefix + "attn.wo");
    p.ln2_gain = Tensor::full({d}, 1.0f, true);
    p.ln2_bias = Tensor::zeros({d}, true);
    if (config_.moe.enabled()) {
      p.gate = init_normal({d, config_.moe.n_experts}, seed, prefix + "moe.gate");
      p.experts.resize(static_cast<std::size_t>(config_.moe.n_experts));
      for (int e = 0; e < config_.moe.n_experts; ++e) {
        const std::string eprefix = prefix + "moe.expert." + std::to_string(e) + ".";
        ExpertParams& ex = p.experts[static_cast<std::size_t>(e)];
        ex.w1 = init_normal({d, config_.d_ff}, seed, eprefix + "w1");
        ex.b1 = Tensor::zeros({config_.d_ff}, true);
        ex.w2 = init_normal({config_.d_ff, d}, seed, eprefix + "w2");
        ex.b2 = Tensor::zeros({d}, true);
      }
    } else {
      p.ffn_w1 = init_normal({d, config_.d_ff}, seed, prefix + "ffn.w1");
      p.ffn_b1 = Tensor::zeros({config_.d_ff}, true);
      p.ffn_w2 = init_normal({config_.d_ff, d}, seed, prefix + "ffn.w2");
      p.ffn_b2 = Tensor::zeros({d}, true);
    }
  }

  if (config_.shared()) {
    scratch_grads_.clear();
    owned_layers_[0].for_each([this](const std::string&, Tensor& t) {
      scratch_grads_.push_back(std::make_shared<std::vector<float>>(t.numel(), 0.0f));
    });
    graph_views_.assign(static_cast<std::size_t>(config_.n_layers_graph), owned_layers_[0]);
    for (LayerParams& view : graph_views_) {
      std::size_t idx = 0;
      view.for_each([this, &idx](const std::string&, Tensor& t) {
        t = t.alias_with_grad(scratch_grads_[idx++]);
      });
    }
  }
}

const LayerParams& Model::graph_layer(int g) const {
  if (g < 0 || g >= config_.n_layers_graph)
    throw std::out_of_range("model: graph layer index out of range");
  if (config_.shared()) return graph_views_[static_cast<std::size_t>(g)];
  return owned_layers_[static_cast<std::size_t>(config_.shared() ? 0 : g)];
}

void Model::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
  fn("embed.tok", tok_embed_);
  fn("embed.pos", pos_embed_);
  fn("final_norm.gain", final_gain_);
  fn("final_norm.bias", final_bias_);
  for (std::size_t i = 0; i < owned_layers_.size(); ++i) {
    const std::string prefix = "layer." + std::to_string(i) + ".";
    owned_layers_[i].for_each(
        [&fn, &prefix](const std::string& name, Tensor& t) { fn(prefix + name, t); });
  }
}

void Model::for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<Model*>(this)->for_each_param(
      [&fn](const std::string& name, Tensor& t) { fn(name, t); });
}

void Model::zero_grads() {
  for_each_param([](const std::string&, Tensor& t) { t.zero_grad(); });
  for (auto& s : scratch_grads_) std::fill(s->begin(), s->end(), 0.0f);
}

void Model::flush_shared_layer_grads() {
  if (!config_.shared()) return;
  std::size_t idx = 0;
  owned_layers_[0].for_each([this, &idx](const std::string&, Tensor& t) {
    auto& scratch = *scratch_grads_[idx++];
    float* g = t.grad();
    for (std::size_t i = 0; i < scratch.size(); ++i) {
      g[i] += scratch[i];
      scratch[i] = 0.0f;
    }
  });
}

std::int64_t Model::scratch_grad_bytes() const {
  std::int64_t total = 0;
  for (const auto& s : scratch_grads_) total += static_cast<std::int64_t>(s->size() * sizeof(float));
  return total;
}

Tensor Model::embed_forward(GradTape* tape, std::span<const int> tokens, int batch) const {
  if (batch <= 0 || tokens.size() % static_cast<std::size_t>(batch) != 0)
    throw std::invalid_argument("forward: token count must be a multiple of batch");
  const int seq = static_cast<int>(tokens.size()) / batch;
  if (seq > config_.seq_len)
    throw std::invalid_argument("forward: sequence longer than configured seq_len");
  Tensor x = embedding_lookup(tape, tok_embed_, tokens);
  std::vector<int> pos(tokens.size());
  for (int b = 0; b < batch; ++b)
    for (int s = 0; s < seq; ++s) pos[static_cast<std::size_t>(b) * seq + s] = s;
  Tensor pe = embedding_lookup(tape, pos_embed_, pos);
  return add(tape, x, pe);
}

Tensor Model::ffn_forward(GradTape* tape, const LayerParams& p, const Tensor& x) const {
  Tensor h = gelu(tape, add_bias(tape, matmul(tape, x, p.ffn_w1), p.ffn_b1));
  return add_bias(tape, matmul(tape, h, p.ffn_w2), p.ffn_b2);
}

Tensor Model::moe_forward(GradTape* tape, const LayerParams& p, const Tensor& x) const {
  const MoEConfig& moe = config_.moe;
  Tensor logits = matmul(tape, x, p.gate);
  Routing routing = moe_dispatch(logits, moe);
  Tensor weights = selected_softmax(tape, logits, routing.selected, routing.survived, routing.k);
  std::vector<Tensor> outs(static_cast<std::size_t>(moe.n_experts));
  for (int e = 0; e < moe.n_experts; ++e) {
    const auto& rows = routing.expert_rows[static_cast<std::size_t>(e)];
    if (rows.empty()) continue;
    const ExpertParams& ex = p.experts[static_cast<std::size_t>(e)];
    Tensor xe = gather_rows(tape, x, rows);
    Tensor he = gelu(tape, add_bias(tape, matmul(tape, xe, ex.w1), ex.b1));
    outs[static_cast<std::size_t>(e)] = add_bias(tape, matmul(tape, he, ex.w2), ex.b2);
  }
  return moe_combine(tape, outs, routing.expert_rows, routing.expert_slots, weights,
                     routing.n_tokens, config_.d_model);
}

Tensor Model::block_forward(GradTape* tape, int graph_layer_idx, const Tensor& x, int batch,
                            AttentionMode mode) const {
  const LayerParams& p = graph_layer(graph_layer_idx);
  const int rows = x.dim(0);
  const int seq = rows / batch;
  Tensor a = layernorm(tape, x, p.ln1_gain, p.ln1_bias);
  Tensor q = split_heads(tape, matmul(tape, a, p.wq), batch, config_.n_heads, seq);
  Tensor k = split_heads(tape, matmul(tape, a, p.wk), batch, config_.n_heads, seq);
  Tensor v = split_heads(tape, matmul(tape, a, p.wv), batch, config_.n_heads, seq);
  Tensor attn = merge_heads(tape, masked_attention(tape, q, k, v, mode == AttentionMode::Causal));
  Tensor x1 = add(tape, x, matmul(tape, attn, p.wo));
  Tensor b = layernorm(tape, x1, p.ln2_gain, p.ln2_bias);
  Tensor y = config_.moe.enabled() ? moe_forward(tape, p, b) : ffn_forward(tape, p, b);
  return add(tape, x1, y);
}

Tensor Model::head_forward(GradTape* tape, const Tensor& x) const {
  Tensor h = layernorm(tape, x, final_gain_, final_bias_);
  return matmul_nt(tape, h, tok_embed_);  // tied output head
}

Tensor Model::forward(std::span<const int> tokens, int batch, AttentionMode mode) const {
  Tensor x = embed_forward(nullptr, tokens, batch);
  for (int g = 0; g < config_.n_layers_graph; ++g)
    x = block_forward(nullptr, g, x, batch, mode);
  return head_forward(nullptr, x);
}

Routing moe_dispatch(const Tensor& gating_logits, const MoEConfig& moe) {
  moe.validate();
  if (!moe.enabled()) throw std::invalid_argument("moe_dispatch: moe disabled");
  if (gating_logits.ndim() != 2 || gating_logits.dim(1) != moe.n_experts)
    throw std::invalid_argument("moe_dispatch: logits must be [tokens, n_experts]");
  Routing r;
  r.n_tokens = gating_logits.dim(0);
  r.k = moe.n_prototypes;
  const int gs = moe.group_size();
  r.selected.resize(static_cast<std::size_t>(r.n_tokens) * r.k);
  r.survived.assign(static_cast<std::size_t>(r.n_tokens) * r.k, 0);
  r.expert_rows.resize(static_cast<std::size_t>(moe.n_experts));
  r.expert_slots.resize(static_cast<std::size_t>(moe.n_experts));
  r.raw_load.assign(static_cast<std::size_t>(moe.n_experts), 0);
  r.capacity = static_cast<int>(std::ceil(static_cast<double>(moe.capacity_factor) * r.n_tokens /
                                          static_cast<double>(gs)));
  const float* pl = gating_logits.data();
  std::vector<int> load(static_cast<std::size_t>(moe.n_experts), 0);
  for (int t = 0; t < r.n_tokens; ++t) {
    const float* row = pl + static_cast<std::size_t>(t) * moe.n_experts;
    for (int g = 0; g < r.k; ++g) {
      int best = g * gs;
      for (int e = g * gs + 1; e < (g + 1) * gs; ++e)
        if (row[e] > row[best]) best = e;  // ties keep the lowest index
      const std::size_t slot = static_cast<std::size_t>(t) * r.k + g;
      r.selected[slot] = best;
      r.raw_load[static_cast<std::size_t>(best)]++;
      if (load[static_cast<std::size_t>(best)] < r.capacity) {
        load[static_cast<std::size_t>(best)]++;
        r.survived[slot] = 1;
        r.expert_rows[static_cast<std::size_t>(best)].push_back(t);
        r.expert_slots[static_cast<std::size_t>(best)].push_back(g);
      } else {
        r.dropped++;
      }
    }
  }
  return r;
}

int Model::expert_shard(int expert) const {
  if (!config_.moe.enabled()) throw std::logic_error("expert_shard: dense model");
  if (expert < 0 || expert >= config_.moe.n_experts)
    throw std::out_of_range("expert_shard: expert index");
  const int per_shard = config_.moe.n_experts / config_.moe.n_shards;
  return expert / per_shard;
}

std::vector<std::vector<int>> Model::shard_layout() const {
  if (!config_.moe.enabled()) throw std::logic_error("shard_layout: dense model");
  std::vector<std::vector<int>> layout(static_cast<std::size_t>(config_.moe.n_shards));
  for (int e = 0; e < config_.moe.n_experts; ++e)
    layout[static_cast<std::size_t>(expert_shard(e))].push_back(e);
  return layout;
}

void Model::redistribute_experts(int new_n_shards) {
  if (!config_.moe.enabled()) throw std::logic_error("redistribute_experts: dense model");
  if (new_n_shards <= 0 || config_.moe.n_experts % new_n_shards != 0)
    throw std::invalid_argument(
        "redistribute_experts: n_experts must be divisible by new shard count");
  config_.moe.n_shards = new_n_shards;
}

Model Model::delinked() const {
  if (config_.n_layers_params != 1)
    throw std::logic_error("delinked: model is not in shared-parameter mode");
  Model real(config_.as_unshared(), /*seed=*/0);
  real.tok_embed_ = tok_embed_.clone();
  real.pos_embed_ = pos_embed_.clone();
  real.final_gain_ = final_gain_.clone();
  real.final_bias_ = final_bias_.clone();
  const LayerParams& src = owned_layers_[0];
  for (int i = 0; i < real.config_.n_layers_params; ++i) {
    LayerParams& dst = real.owned_layers_[static_cast<std::size_t>(i)];
    std::vector<Tensor*> dst_tensors;
    dst.for_each([&dst_tensors](const std::string&, Tensor& t) { dst_tensors.push_back(&t); });
    std::size_t idx = 0;
    src.for_each([&dst_tensors, &idx](const std::string&, const Tensor& t) {
      *dst_tensors[idx++] = t.clone();
    });
  }
  return real;
}

Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

Model redistribute_experts(const Model& model, int new_n_shards) {
  Model copy = model;  // shallow parameter sharing is fine for layout bookkeeping
  copy.redistribute_experts(new_n_shards);
  return copy;
}

}  // namespace p2r
