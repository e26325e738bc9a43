#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace p2r {

// Dense fp32 tensor. Copies are shallow: they share the underlying data and
// gradient buffers, so a Tensor behaves like a cheap handle. Gradient buffers
// are allocated eagerly for parameters (ensure_grad) and lazily for
// intermediate values the tape needs to write into.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<float> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(data_); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::size_t numel() const;
  std::size_t nbytes() const { return numel() * sizeof(float); }

  float* data() { return data_->data(); }
  const float* data() const { return data_->data(); }
  float& at(std::size_t i) { return (*data_)[i]; }
  float at(std::size_t i) const { return (*data_)[i]; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }
  bool has_grad() const { return static_cast<bool>(grad_); }
  // Allocates the gradient buffer (zero-filled) if not present.
  void ensure_grad();
  void zero_grad();
  float* grad();
  const float* grad() const;

  std::shared_ptr<std::vector<float>> data_ptr() const { return data_; }
  std::shared_ptr<std::vector<float>> grad_ptr() const { return grad_; }

  // New tensor handle sharing this tensor's data but carrying the given
  // gradient buffer. Used for cross-layer parameter sharing, where every
  // graph-layer use of a shared parameter writes its gradient contribution
  // into a common scratch buffer.
  Tensor alias_with_grad(std::shared_ptr<std::vector<float>> grad_buffer) const;
  // Grad-capable alias with a fresh zero gradient buffer (same data).
  Tensor fork_for_grad() const;

  // Deep copy of data (gradient buffer not copied).
  Tensor clone() const;

 private:
  std::vector<int> shape_;
  std::shared_ptr<std::vector<float>> data_;
  std::shared_ptr<std::vector<float>> grad_;
  bool requires_grad_ = false;
};

// Ordered record of backward closures, one per recorded primitive use.
// backward() replays them exactly once in reverse recording order; each use
// of a tensor accumulates (+=) into that tensor's grad buffer, so reverse
// topological order falls out of the recording order.
class GradTape {
 public:
  void record(std::function<void()> backward_fn) { entries_.push_back(std::move(backward_fn)); }
  // Runs all recorded closures in reverse order. Caller seeds output grads first.
  void backward();
  // Convenience for scalar losses: seeds loss grad with 1 and runs backward.
  void backward_scalar(Tensor& loss);
  void clear() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
};

// ---------------------------------------------------------------------------
// Primitives. `tape == nullptr` means plain inference: nothing is recorded
// and outputs do not require grad. All primitives are single-threaded and
// bit-deterministic for fixed inputs.
// ---------------------------------------------------------------------------

// [m,k] x [k,n] -> [m,n]
Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b);
// [m,k] x [n,k]^T -> [m,n] (b used transposed; no copy)
Tensor matmul_nt(GradTape* tape, const Tensor& a, const Tensor& b);
// Elementwise sum, identical shapes.
Tensor add(GradTape* tape, const Tensor& a, const Tensor& b);
// Adds row vector b ([n]) to every row of x ([rows,n]).
Tensor add_bias(GradTape* tape, const Tensor& x, const Tensor& b);
// Exact (erf-based) GELU.
Tensor gelu(GradTape* tape, const Tensor& x);

// Row-wise layer normalization over the last dimension with affine gain/bias.
Tensor layernorm(GradTape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps = 1e-5f);

// Gathers rows of an embedding table: table [V,d], ids in [0,V) -> [ids.size,d].
Tensor embedding_lookup(GradTape* tape, const Tensor& table, std::span<const int> ids);

// Gathers the given rows of x ([n,d]) -> [rows.size,d]. Backward scatter-adds.
Tensor gather_rows(GradTape* tape, const Tensor& x, std::vector<int> rows);

// [batch*seq, d] -> [batch, heads, seq, d/heads] (pure permutation).
Tensor split_heads(GradTape* tape, const Tensor& x, int batch, int heads, int seq);
// Inverse of split_heads: [batch, heads, seq, hd] -> [batch*seq, heads*hd].
Tensor merge_heads(GradTape* tape, const Tensor& x);

// Scaled dot-product attention over [batch, heads, seq, hd] tensors.
// causal=true masks position j > i; causal=false is full visibility.
Tensor masked_attention(GradTape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        bool causal);

// Row-subset softmax used for expert combine weights. For each row t, the
// entries logits[t, selected[t*k+j]] with survived[t*k+j] != 0 are softmaxed
// together; dropped slots get weight 0. Result is [rows, k].
Tensor selected_softmax(GradTape* tape, const Tensor& logits, std::span<const int> selected,
                        std::span<const std::uint8_t> survived, int k);

// Weighted scatter-combine of per-expert outputs back into token rows:
// out[rows[e][r]] += weights[rows[e][r], slots[e][r]] * expert_out[e][r].
// expert_rows/slots index by expert; undefined expert tensors are skipped.
Tensor moe_combine(GradTape* tape, const std::vector<Tensor>& expert_outputs,
                   const std::vector<std::vector<int>>& expert_rows,
                   const std::vector<std::vector<int>>& expert_slots, const Tensor& weights,
                   int n_tokens, int d_model);

// Mean negative log softmax over rows: logits [n,V], targets [n].
// With a mask only rows with mask!=0 contribute; `denom` overrides the mean
// divisor (used by gradient accumulation to reproduce a large-batch mean).
Tensor softmax_cross_entropy(GradTape* tape, const Tensor& logits, std::span<const int> targets);
Tensor softmax_cross_entropy(GradTape* tape, const Tensor& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask, double denom);

}  // namespace p2r
