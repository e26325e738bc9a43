#include "p2r/tensor.hpp"

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <stdexcept>

namespace p2r {

namespace {

void blas_single_thread() {
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

constexpr float kInvSqrt2 = 0.70710678118654752f;
constexpr float kInvSqrt2Pi = 0.39894228040143268f;

}  // namespace

std::size_t Tensor::numel() const { return data_ ? data_->size() : 0; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  std::size_t n = shape_numel(shape);
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<float>>(n, 0.0f);
  t.requires_grad_ = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (float& v : *t.data_) v = value;
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size())
    throw std::invalid_argument("tensor: shape does not match value count");
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::make_shared<std::vector<float>>(std::move(values));
  t.requires_grad_ = requires_grad;
  if (requires_grad) t.ensure_grad();
  return t;
}

void Tensor::ensure_grad() {
  if (!grad_) grad_ = std::make_shared<std::vector<float>>(numel(), 0.0f);
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0f);
}

float* Tensor::grad() {
  ensure_grad();
  return grad_->data();
}

const float* Tensor::grad() const {
  if (!grad_) throw std::logic_error("tensor: grad buffer not allocated");
  return grad_->data();
}

Tensor Tensor::alias_with_grad(std::shared_ptr<std::vector<float>> grad_buffer) const {
  if (grad_buffer && grad_buffer->size() != numel())
    throw std::invalid_argument("tensor: grad alias size mismatch");
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  t.grad_ = std::move(grad_buffer);
  t.requires_grad_ = true;
  return t;
}

Tensor Tensor::fork_for_grad() const {
  return alias_with_grad(std::make_shared<std::vector<float>>(numel(), 0.0f));
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = std::make_shared<std::vector<float>>(*data_);
  t.requires_grad_ = requires_grad_;
  if (requires_grad_) t.ensure_grad();
  return t;
}

void GradTape::backward() {
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

void GradTape::backward_scalar(Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward_scalar: loss must be scalar");
  loss.grad()[0] += 1.0f;
  backward();
}

namespace {

bool track(GradTape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

void check_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw std::invalid_argument(std::string(op) + ": expected 2-D tensor");
}

}  // namespace

Tensor matmul(GradTape* tape, const Tensor& a, const Tensor& b) {
  blas_single_thread();
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) throw std::invalid_argument("matmul: inner dimensions disagree");
  Tensor out = Tensor::zeros({m, n});
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, a.data(), k, b.data(), n,
              0.0f, out.data(), n);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([a, b, out, m, n, k]() mutable {
      const float* g = out.grad();
      if (a.requires_grad())
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0f, g, n, b.data(), n, 1.0f,
                    a.grad(), k);
      if (b.requires_grad())
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0f, a.data(), k, g, n, 1.0f,
                    b.grad(), n);
    });
  }
  return out;
}

Tensor matmul_nt(GradTape* tape, const Tensor& a, const Tensor& b) {
  blas_single_thread();
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) throw std::invalid_argument("matmul_nt: inner dimensions disagree");
  Tensor out = Tensor::zeros({m, n});
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0f, a.data(), k, b.data(), k,
              0.0f, out.data(), n);
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([a, b, out, m, n, k]() mutable {
      const float* g = out.grad();
      if (a.requires_grad())
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, k, n, 1.0f, g, n, b.data(), k,
                    1.0f, a.grad(), k);
      if (b.requires_grad())
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, n, k, m, 1.0f, g, n, a.data(), k, 1.0f,
                    b.grad(), k);
    });
  }
  return out;
}

Tensor add(GradTape* tape, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("add: shape mismatch");
  Tensor out = Tensor::zeros(a.shape());
  const std::size_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (track(tape, {&a, &b})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([a, b, out, n]() mutable {
      const float* g = out.grad();
      if (a.requires_grad()) {
        float* ga = a.grad();
        for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        float* gb = b.grad();
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor add_bias(GradTape* tape, const Tensor& x, const Tensor& b) {
  check_2d(x, "add_bias");
  if (b.ndim() != 1 || b.dim(0) != x.dim(1))
    throw std::invalid_argument("add_bias: bias length must match row width");
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::zeros(x.shape());
  const float* px = x.data();
  const float* pb = b.data();
  float* po = out.data();
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) po[r * cols + c] = px[r * cols + c] + pb[c];
  if (track(tape, {&x, &b})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([x, b, out, rows, cols]() mutable {
      const float* g = out.grad();
      if (x.requires_grad()) {
        float* gx = x.grad();
        for (int i = 0; i < rows * cols; ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        float* gb = b.grad();
        for (int r = 0; r < rows; ++r)
          for (int c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
      }
    });
  }
  return out;
}

Tensor gelu(GradTape* tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const std::size_t n = x.numel();
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t i = 0; i < n; ++i) {
    const float v = px[i];
    po[i] = 0.5f * v * (1.0f + std::erf(v * kInvSqrt2));
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([x, out, n]() mutable {
      if (!x.requires_grad()) return;
      const float* g = out.grad();
      const float* px2 = x.data();
      float* gx = x.grad();
      for (std::size_t i = 0; i < n; ++i) {
        const float v = px2[i];
        const float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor layernorm(GradTape* tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                 float eps) {
  if (x.ndim() < 1) throw std::invalid_argument("layernorm: rank-0 input");
  const int d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
    throw std::invalid_argument("layernorm: gain/bias length must match last dimension");
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  Tensor out = Tensor::zeros(x.shape());
  // x_hat rows are kept for backward.
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_sigma = std::make_shared<std::vector<float>>(rows);
  const float* px = x.data();
  const float* pg = gain.data();
  const float* pb = bias.data();
  float* po = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = px + r * d;
    float mean = 0.0f;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int c = 0; c < d; ++c) {
      const float dx = row[c] - mean;
      var += dx * dx;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + eps);
    (*inv_sigma)[r] = inv;
    for (int c = 0; c < d; ++c) {
      const float h = (row[c] - mean) * inv;
      (*xhat)[r * d + c] = h;
      po[r * d + c] = h * pg[c] + pb[c];
    }
  }
  if (track(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([x, gain, bias, out, xhat, inv_sigma, rows, d]() mutable {
      const float* g = out.grad();
      const float* pg2 = gain.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* grow = g + r * d;
        const float* hrow = xhat->data() + r * d;
        if (gain.requires_grad()) {
          float* gg = gain.grad();
          for (int c = 0; c < d; ++c) gg[c] += grow[c] * hrow[c];
        }
        if (bias.requires_grad()) {
          float* gb = bias.grad();
          for (int c = 0; c < d; ++c) gb[c] += grow[c];
        }
        if (x.requires_grad()) {
          // dy/dx with y = ((x - mu) / sigma) * gain + bias
          float sum_gy = 0.0f, sum_gyh = 0.0f;
          for (int c = 0; c < d; ++c) {
            const float gy = grow[c] * pg2[c];
            sum_gy += gy;
            sum_gyh += gy * hrow[c];
          }
          const float inv = (*inv_sigma)[r];
          const float inv_d = 1.0f / static_cast<float>(d);
          float* gx = x.grad() + r * d;
          for (int c = 0; c < d; ++c) {
            const float gy = grow[c] * pg2[c];
            gx[c] += inv * (gy - inv_d * sum_gy - hrow[c] * inv_d * sum_gyh);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(GradTape* tape, const Tensor& table, std::span<const int> ids) {
  check_2d(table, "embedding_lookup");
  const int vocab = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({n, d});
  const float* pt = table.data();
  float* po = out.data();
  for (int i = 0; i < n; ++i) {
    const int id = ids[i];
    if (id < 0 || id >= vocab) throw std::out_of_range("embedding_lookup: id out of range");
    const float* row = pt + static_cast<std::size_t>(id) * d;
    float* dst = po + static_cast<std::size_t>(i) * d;
    for (int c = 0; c < d; ++c) dst[c] = row[c];
  }
  if (track(tape, {&table})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    std::vector<int> ids_copy(ids.begin(), ids.end());
    tape->record([table, out, ids_copy, d]() mutable {
      if (!table.requires_grad()) return;
      const float* g = out.grad();
      float* gt = table.grad();
      for (std::size_t i = 0; i < ids_copy.size(); ++i) {
        float* dst = gt + static_cast<std::size_t>(ids_copy[i]) * d;
        const float* src = g + i * d;
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor gather_rows(GradTape* tape, const Tensor& x, std::vector<int> rows) {
  check_2d(x, "gather_rows");
  const int n = x.dim(0), d = x.dim(1);
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), d});
  const float* px = x.data();
  float* po = out.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= n) throw std::out_of_range("gather_rows: row index out of range");
    const float* src = px + static_cast<std::size_t>(r) * d;
    float* dst = po + i * d;
    for (int c = 0; c < d; ++c) dst[c] = src[c];
  }
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([x, out, rows = std::move(rows), d]() mutable {
      if (!x.requires_grad()) return;
      const float* g = out.grad();
      float* gx = x.grad();
      for (std::size_t i = 0; i < rows.size(); ++i) {
        float* dst = gx + static_cast<std::size_t>(rows[i]) * d;
        const float* src = g + i * d;
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

namespace {

// Shared helper for the two head permutations. forward=true maps
// [batch*seq, heads*hd] to [batch, heads, seq, hd]; backward applies the
// inverse index map.
void permute_heads(const float* src, float* dst, int batch, int heads, int seq, int hd,
                   bool to_heads) {
  for (int b = 0; b < batch; ++b)
    for (int h = 0; h < heads; ++h)
      for (int s = 0; s < seq; ++s) {
        const std::size_t flat = (static_cast<std::size_t>(b) * seq + s) * (heads * hd) +
                                 static_cast<std::size_t>(h) * hd;
        const std::size_t split =
            ((static_cast<std::size_t>(b) * heads + h) * seq + s) * hd;
        if (to_heads)
          for (int c = 0; c < hd; ++c) dst[split + c] = src[flat + c];
        else
          for (int c = 0; c < hd; ++c) dst[flat + c] = src[split + c];
      }
}

}  // namespace

Tensor split_heads(GradTape* tape, const Tensor& x, int batch, int heads, int seq) {
  check_2d(x, "split_heads");
  const int d = x.dim(1);
  if (x.dim(0) != batch * seq || d % heads != 0)
    throw std::invalid_argument("split_heads: shape incompatible with batch/heads/seq");
  const int hd = d / heads;
  Tensor out = Tensor::zeros({batch, heads, seq, hd});
  permute_heads(x.data(), out.data(), batch, heads, seq, hd, true);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([x, out, batch, heads, seq, hd]() mutable {
      if (!x.requires_grad()) return;
      std::vector<float> tmp(x.numel());
      permute_heads(out.grad(), tmp.data(), batch, heads, seq, hd, false);
      float* gx = x.grad();
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    });
  }
  return out;
}

Tensor merge_heads(GradTape* tape, const Tensor& x) {
  if (x.ndim() != 4) throw std::invalid_argument("merge_heads: expected 4-D tensor");
  const int batch = x.dim(0), heads = x.dim(1), seq = x.dim(2), hd = x.dim(3);
  Tensor out = Tensor::zeros({batch * seq, heads * hd});
  permute_heads(x.data(), out.data(), batch, heads, seq, hd, false);
  if (track(tape, {&x})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([x, out, batch, heads, seq, hd]() mutable {
      if (!x.requires_grad()) return;
      std::vector<float> tmp(x.numel());
      permute_heads(out.grad(), tmp.data(), batch, heads, seq, hd, true);
      float* gx = x.grad();
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    });
  }
  return out;
}

Tensor masked_attention(GradTape* tape, const Tensor& q, const Tensor& k, const Tensor& v,
                        bool causal) {
  if (q.ndim() != 4 || k.shape() != q.shape() || v.shape() != q.shape())
    throw std::invalid_argument("masked_attention: q/k/v must share a [B,H,S,hd] shape");
  blas_single_thread();
  const int batch = q.dim(0), heads = q.dim(1), seq = q.dim(2), hd = q.dim(3);
  const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
  Tensor out = Tensor::zeros(q.shape());
  // Softmax probabilities are retained for backward: [B,H,S,S].
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<std::size_t>(batch) * heads * seq * seq);
  const std::size_t block = static_cast<std::size_t>(seq) * hd;
  std::vector<float> scores(static_cast<std::size_t>(seq) * seq);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = (static_cast<std::size_t>(b) * heads + h) * block;
      const float* pq = q.data() + off;
      const float* pk = k.data() + off;
      const float* pv = v.data() + off;
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, seq, seq, hd, scale, pq, hd, pk, hd,
                  0.0f, scores.data(), seq);
      float* pp = probs->data() + (static_cast<std::size_t>(b) * heads + h) *
                                      static_cast<std::size_t>(seq) * seq;
      for (int i = 0; i < seq; ++i) {
        const int limit = causal ? i + 1 : seq;
        const float* srow = scores.data() + static_cast<std::size_t>(i) * seq;
        float* prow = pp + static_cast<std::size_t>(i) * seq;
        float mx = srow[0];
        for (int j = 1; j < limit; ++j) mx = std::max(mx, srow[j]);
        float sum = 0.0f;
        for (int j = 0; j < limit; ++j) {
          const float e = std::exp(srow[j] - mx);
          prow[j] = e;
          sum += e;
        }
        const float inv = 1.0f / sum;
        for (int j = 0; j < limit; ++j) prow[j] *= inv;
        for (int j = limit; j < seq; ++j) prow[j] = 0.0f;
      }
      cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, seq, hd, seq, 1.0f, pp, seq, pv, hd,
                  0.0f, out.data() + off, hd);
    }
  }
  if (track(tape, {&q, &k, &v})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([q, k, v, out, probs, batch, heads, seq, hd, scale]() mutable {
      const std::size_t block2 = static_cast<std::size_t>(seq) * hd;
      std::vector<float> dp(static_cast<std::size_t>(seq) * seq);
      std::vector<float> ds(static_cast<std::size_t>(seq) * seq);
      for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
          const std::size_t off = (static_cast<std::size_t>(b) * heads + h) * block2;
          const float* pp = probs->data() + (static_cast<std::size_t>(b) * heads + h) *
                                                static_cast<std::size_t>(seq) * seq;
          const float* g = out.grad() + off;
          if (v.requires_grad())
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, seq, hd, seq, 1.0f, pp, seq, g,
                        hd, 1.0f, v.grad() + off, hd);
          // dP = dO . V^T ; dS = P * (dP - rowsum(dP * P))
          cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, seq, seq, hd, 1.0f, g, hd,
                      v.data() + off, hd, 0.0f, dp.data(), seq);
          for (int i = 0; i < seq; ++i) {
            const float* prow = pp + static_cast<std::size_t>(i) * seq;
            const float* dprow = dp.data() + static_cast<std::size_t>(i) * seq;
            float dot = 0.0f;
            for (int j = 0; j < seq; ++j) dot += prow[j] * dprow[j];
            float* dsrow = ds.data() + static_cast<std::size_t>(i) * seq;
            for (int j = 0; j < seq; ++j) dsrow[j] = prow[j] * (dprow[j] - dot);
          }
          if (q.requires_grad())
            cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, seq, hd, seq, scale, ds.data(),
                        seq, k.data() + off, hd, 1.0f, q.grad() + off, hd);
          if (k.requires_grad())
            cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, seq, hd, seq, scale, ds.data(),
                        seq, q.data() + off, hd, 1.0f, k.grad() + off, hd);
        }
      }
    });
  }
  return out;
}

Tensor selected_softmax(GradTape* tape, const Tensor& logits, std::span<const int> selected,
                        std::span<const std::uint8_t> survived, int k) {
  check_2d(logits, "selected_softmax");
  const int rows = logits.dim(0), width = logits.dim(1);
  if (selected.size() != static_cast<std::size_t>(rows) * k ||
      survived.size() != selected.size())
    throw std::invalid_argument("selected_softmax: selection size mismatch");
  Tensor out = Tensor::zeros({rows, k});
  const float* pl = logits.data();
  float* po = out.data();
  for (int t = 0; t < rows; ++t) {
    float mx = -1e30f;
    for (int j = 0; j < k; ++j) {
      const int e = selected[static_cast<std::size_t>(t) * k + j];
      if (e < 0 || e >= width) throw std::out_of_range("selected_softmax: expert index");
      if (survived[static_cast<std::size_t>(t) * k + j])
        mx = std::max(mx, pl[static_cast<std::size_t>(t) * width + e]);
    }
    float sum = 0.0f;
    for (int j = 0; j < k; ++j) {
      const std::size_t slot = static_cast<std::size_t>(t) * k + j;
      if (!survived[slot]) continue;
      const float e = std::exp(pl[static_cast<std::size_t>(t) * width + selected[slot]] - mx);
      po[slot] = e;
      sum += e;
    }
    if (sum > 0.0f) {
      const float inv = 1.0f / sum;
      for (int j = 0; j < k; ++j) {
        const std::size_t slot = static_cast<std::size_t>(t) * k + j;
        if (survived[slot]) po[slot] *= inv;
      }
    }
  }
  if (track(tape, {&logits})) {
    out.set_requires_grad(true);
    out.ensure_grad();
    std::vector<int> sel(selected.begin(), selected.end());
    std::vector<std::uint8_t> sur(survived.begin(), survived.end());
    tape->record([logits, out, sel = std::move(sel), sur = std::move(sur), rows, width,
                  k]() mutable {
      if (!logits.requires_grad()) return;
      const float* w = out.data();
      const float* g = out.grad();
      float* gl = logits.grad();
      for (int t = 0; t < rows; ++t) {
        float dot = 0.0f;
        for (int j = 0; j < k; ++j) {
          const std::size_t slot = static_cast<std::size_t>(t) * k + j;
          if (sur[slot]) dot += w[slot] * g[slot];
        }
        for (int j = 0; j < k; ++j) {
          const std::size_t slot = static_cast<std::size_t>(t) * k + j;
          if (!sur[slot]) continue;
          gl[static_cast<std::size_t>(t) * width + sel[slot]] += w[slot] * (g[slot] - dot);
        }
      }
    });
  }
  return out;
}

Tensor moe_combine(GradTape* tape, const std::vector<Tensor>& expert_outputs,
                   const std::vector<std::vector<int>>& expert_rows,
                   const std::vector<std::vector<int>>& expert_slots, const Tensor& weights,
                   int n_tokens, int d_model) {
  const std::size_t n_experts = expert_outputs.size();
  if (expert_rows.size() != n_experts || expert_slots.size() != n_experts)
    throw std::invalid_argument("moe_combine: per-expert vectors must align");
  const int k = weights.dim(1);
  Tensor out = Tensor::zeros({n_tokens, d_model});
  const float* pw = weights.data();
  float* po = out.data();
  bool needs_grad = false;
  for (std::size_t e = 0; e < n_experts; ++e) {
    if (!expert_outputs[e].defined()) continue;
    needs_grad = needs_grad || expert_outputs[e].requires_grad();
    const float* py = expert_outputs[e].data();
    for (std::size_t r = 0; r < expert_rows[e].size(); ++r) {
      const int row = expert_rows[e][r];
      const float wv = pw[static_cast<std::size_t>(row) * k + expert_slots[e][r]];
      float* dst = po + static_cast<std::size_t>(row) * d_model;
      const float* src = py + r * d_model;
      for (int c = 0; c < d_model; ++c) dst[c] += wv * src[c];
    }
  }
  needs_grad = needs_grad || weights.requires_grad();
  if (tape && needs_grad) {
    out.set_requires_grad(true);
    out.ensure_grad();
    tape->record([expert_outputs, expert_rows, expert_slots, weights, out, d_model,
                  k]() mutable {
      const float* g = out.grad();
      const float* pw2 = weights.data();
      for (std::size_t e = 0; e < expert_outputs.size(); ++e) {
        if (!expert_outputs[e].defined()) continue;
        const float* py = expert_outputs[e].data();
        for (std::size_t r = 0; r < expert_rows[e].size(); ++r) {
          const int row = expert_rows[e][r];
          const int slot = expert_slots[e][r];
          const float wv = pw2[static_cast<std::size_t>(row) * k + slot];
          const float* grow = g + static_cast<std::size_t>(row) * d_model;
          if (expert_outputs[e].requires_grad()) {
            float* gy = expert_outputs[e].grad() + r * d_model;
            for (int c = 0; c < d_model; ++c) gy[c] += wv * grow[c];
          }
          if (weights.requires_grad()) {
            const float* src = py + r * d_model;
            float dot = 0.0f;
            for (int c = 0; c < d_model; ++c) dot += grow[c] * src[c];
            weights.grad()[static_cast<std::size_t>(row) * k + slot] += dot;
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(GradTape* tape, const Tensor& logits, std::span<const int> targets) {
  return softmax_cross_entropy(tape, logits, targets, {}, static_cast<double>(targets.size()));
}

Tensor softmax_cross_entropy(GradTape* tape, const Tensor& logits, std::span<const int> targets,
                             std::span<const std::uint8_t> mask, double denom) {
  check_2d(logits, "softmax_cross_entropy");
  const int rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != static_cast<std::size_t>(rows))
    throw std::invalid_argument("softmax_cross_entropy: one target per row required");
  if (!mask.empty() && mask.size() != targets.size())
    throw std::invalid_argument("softmax_cross_entropy: mask size mismatch");
  if (denom <= 0.0) throw std::invalid_argument("softmax_cross_entropy: denominator must be > 0");
  // Probabilities are retained for backward.
  auto probs = std::make_shared<std::vector<float>>(logits.numel());
  const float* pl = logits.data();
  double total = 0.0;
  for (int r = 0; r < rows; ++r) {
    const bool active = mask.empty() || mask[r] != 0;
    const int t = targets[r];
    if (active && (t < 0 || t >= vocab))
      throw std::out_of_range("softmax_cross_entropy: target out of range");
    const float* row = pl + static_cast<std::size_t>(r) * vocab;
    float* prow = probs->data() + static_cast<std::size_t>(r) * vocab;
    float mx = row[0];
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, row[c]);
    float sum = 0.0f;
    for (int c = 0; c < vocab; ++c) {
      const float e = std::exp(row[c] - mx);
      prow[c] = e;
      sum += e;
    }
    const float inv = 1.0f / sum;
    for (int c = 0; c < vocab; ++c) prow[c] *= inv;
    if (active) total += -std::log(static_cast<double>(prow[t]));
  }
  Tensor loss = Tensor::from_data({1}, {static_cast<float>(total / denom)});
  if (track(tape, {&logits})) {
    loss.set_requires_grad(true);
    loss.ensure_grad();
    std::vector<int> tgt(targets.begin(), targets.end());
    std::vector<std::uint8_t> msk(mask.begin(), mask.end());
    tape->record([logits, loss, probs, tgt = std::move(tgt), msk = std::move(msk), rows, vocab,
                  denom]() mutable {
      if (!logits.requires_grad()) return;
      const float scale = loss.grad()[0] / static_cast<float>(denom);
      float* gl = logits.grad();
      for (int r = 0; r < rows; ++r) {
        if (!msk.empty() && msk[r] == 0) continue;
        const float* prow = probs->data() + static_cast<std::size_t>(r) * vocab;
        float* grow = gl + static_cast<std::size_t>(r) * vocab;
        for (int c = 0; c < vocab; ++c) grow[c] += scale * prow[c];
        grow[tgt[r]] -= scale;
      }
    });
  }
  return loss;
}

}  // namespace p2r
