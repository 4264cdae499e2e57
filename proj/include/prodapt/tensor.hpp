#pragma once

// Dense float32 tensors with reverse-mode autodiff on an explicit tape.
// Forward ops never mutate their inputs; each op allocates a fresh output.
// Gradients accumulate (+=) into requires_grad tensors when a tape replays
// backward, so two backward passes double the gradients.
//
// Reduction order inside every kernel is fixed and independent of how rows
// are batched, which keeps stacked (fused) and per-stream (sequential)
// evaluation bit-identical.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "prodapt/common.hpp"

namespace prodapt {

// ---------------------------------------------------------------------------
// Fast elementwise transcendentals. Plain arithmetic only, so loops over
// them autovectorize; results are deterministic on a given build.
// ---------------------------------------------------------------------------

// expf to ~2 ulp via range reduction + degree-5 polynomial.
// Returns exactly 0 for -inf and for inputs below the flush threshold.
inline float fast_exp(float x) {
    if (x < -87.33655f) return 0.0f;
    if (x > 88.72283f) return std::numeric_limits<float>::infinity();
    const float z = x * 1.44269504088896341f;  // x / ln2
    const float n = std::floor(z + 0.5f);
    // Two-step Cody-Waite reduction keeps r accurate.
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    // Scale by 2^n through the exponent bits.
    const int32_t e = static_cast<int32_t>(n);
    uint32_t bits;
    std::memcpy(&bits, &p, 4);
    bits += static_cast<uint32_t>(e) << 23;
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

inline float fast_tanh(float x) {
    const float ax = std::fabs(x);
    if (ax > 9.0f) return x > 0 ? 1.0f : -1.0f;
    const float e = fast_exp(2.0f * ax);
    const float t = 1.0f - 2.0f / (e + 1.0f);
    return x >= 0 ? t : -t;
}

enum class GeluKind : uint32_t { Tanh = 0, Erf = 1 };

inline const char* gelu_kind_name(GeluKind k) {
    return k == GeluKind::Tanh ? "gelu_tanh" : "gelu_erf";
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

namespace detail {

struct Storage {
    std::vector<int64_t> shape;
    std::vector<float> data;
    bool requires_grad = false;
    std::unique_ptr<std::vector<float>> grad;  // lazily allocated, same numel

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }

    void ensure_grad() {
        if (!grad) grad = std::make_unique<std::vector<float>>(data.size(), 0.0f);
    }
};

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
        auto st = std::make_shared<detail::Storage>();
        st->shape = std::move(shape);
        st->data.assign(static_cast<size_t>(st->numel()), 0.0f);
        st->requires_grad = requires_grad;
        return Tensor(std::move(st));
    }

    static Tensor full(std::vector<int64_t> shape, float value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.st_->data.begin(), t.st_->data.end(), value);
        return t;
    }

    static Tensor from_data(std::vector<int64_t> shape, std::vector<float> data,
                            bool requires_grad = false) {
        auto st = std::make_shared<detail::Storage>();
        st->shape = std::move(shape);
        if (st->numel() != static_cast<int64_t>(data.size()))
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + detail::shape_str(st->shape));
        st->data = std::move(data);
        st->requires_grad = requires_grad;
        return Tensor(std::move(st));
    }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, float mean, float stddev,
                        bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (float& v : t.st_->data) v = rng.next_normal(mean, stddev);
        return t;
    }

    bool defined() const { return static_cast<bool>(st_); }
    const std::vector<int64_t>& shape() const { return st_->shape; }
    int ndim() const { return static_cast<int>(st_->shape.size()); }
    int64_t dim(int i) const { return st_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return st_->numel(); }

    const float* data() const { return st_->data.data(); }
    float* mut_data() { return st_->data.data(); }
    const std::vector<float>& vec() const { return st_->data; }

    bool requires_grad() const { return st_->requires_grad; }
    void set_requires_grad(bool rg) { st_->requires_grad = rg; }

    bool has_grad() const { return st_->grad != nullptr; }
    const float* grad() const { return st_->grad ? st_->grad->data() : nullptr; }
    float* grad_mut() {
        st_->ensure_grad();
        return st_->grad->data();
    }
    void zero_grad() {
        if (st_->grad) std::fill(st_->grad->begin(), st_->grad->end(), 0.0f);
    }
    void drop_grad() { st_->grad.reset(); }

    // Deep copy of data (grad is not copied).
    Tensor clone() const {
        Tensor t = zeros(st_->shape, st_->requires_grad);
        t.st_->data = st_->data;
        return t;
    }

    float item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_string());
        return st_->data[0];
    }

    std::string shape_string() const { return detail::shape_str(st_->shape); }

    bool same_storage(const Tensor& other) const { return st_ == other.st_; }
    detail::Storage* storage() const { return st_.get(); }
    std::shared_ptr<detail::Storage> storage_ptr() const { return st_; }

private:
    explicit Tensor(std::shared_ptr<detail::Storage> st) : st_(std::move(st)) {}
    std::shared_ptr<detail::Storage> st_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape {
public:
    // Record an op whose output is `out`; `back` pushes grads into inputs.
    void record(const Tensor& out, std::function<void()> back) {
        nodes_.push_back(Node{out.storage_ptr(), std::move(back)});
    }

    size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Replays the tape in reverse. Transient grads of op outputs are reset
    // first so repeated backward passes contribute identically to leaf
    // parameters (two passes => exactly doubled leaf gradients).
    void run_backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw ContractError("backward requires a scalar loss, got " + loss.shape_string());
        bool on_tape = false;
        for (const auto& n : nodes_)
            if (n.out.get() == loss.storage()) on_tape = true;
        if (!on_tape) throw ContractError("loss tensor was not produced on this tape");
        for (const auto& n : nodes_) n.out->grad.reset();
        loss.storage()->ensure_grad();
        (*loss.storage()->grad)[0] = 1.0f;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (!it->out->grad) continue;  // not on the path from the loss
            it->back();
        }
    }

private:
    struct Node {
        std::shared_ptr<detail::Storage> out;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;
};

inline void backward(const Tensor& loss, Tape& tape) { tape.run_backward(loss); }

// ---------------------------------------------------------------------------
// Kernels. Inner loops stay contiguous and reduction order per output
// element is fixed regardless of the number of rows.
// ---------------------------------------------------------------------------

// Raw buffer kernels. The tape ops and the tape-free evaluator both run on
// these, which is what keeps fused and standalone evaluation bit-identical:
// per-element reduction order never depends on how many rows are batched.
namespace kern {

// C[m x n] += A[m x k] * B[k x n]; callers zero C for a plain product.
inline void mm_acc(const float* a, const float* b, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        float* crow = c + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            const float* brow = b + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[k x n] += A^T[k x m] * G[m x n], accumulated row-wise over i.
inline void mm_at_acc(const float* a, const float* g, float* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const float* arow = a + i * k;
        const float* grow = g + i * n;
        for (int64_t kk = 0; kk < k; ++kk) {
            const float av = arow[kk];
            float* crow = c + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * grow[j];
        }
    }
}

inline void transpose_into(const float* x, float* out, int64_t m, int64_t n) {
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
}

inline void add_bias_row(const float* x, const float* bias, float* out, int64_t d) {
    for (int64_t j = 0; j < d; ++j) out[j] = x[j] + bias[j];
}

inline void add_rows(const float* a, const float* b, float* out, int64_t n) {
    for (int64_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

inline void gelu_buf(const float* x, float* out, int64_t n, GeluKind kind) {
    constexpr float kC0 = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float kC1 = 0.044715f;
    if (kind == GeluKind::Tanh) {
        for (int64_t i = 0; i < n; ++i) {
            const float v = x[i];
            const float t = fast_tanh(kC0 * (v + kC1 * v * v * v));
            out[i] = 0.5f * v * (1.0f + t);
        }
    } else {
        for (int64_t i = 0; i < n; ++i) {
            const float v = x[i];
            out[i] = 0.5f * v * (1.0f + std::erf(v * 0.7071067811865476f));
        }
    }
}

// Softmax over one row; -inf inputs map to exactly zero probability.
inline void softmax_row(const float* x, float* out, int64_t n) {
    const float ninf = -std::numeric_limits<float>::infinity();
    float mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    float s = 0.0f;
    for (int64_t j = 0; j < n; ++j) {
        const float e = (x[j] == ninf) ? 0.0f : fast_exp(x[j] - mx);
        out[j] = e;
        s += e;
    }
    const float inv = 1.0f / s;
    for (int64_t j = 0; j < n; ++j) out[j] *= inv;
}

// Normalize one row and apply the affine map.
inline void layernorm_row(const float* x, const float* gain, const float* bias, float* out,
                          int64_t d, float eps, float* xhat_out = nullptr,
                          float* invstd_out = nullptr) {
    const float invd = 1.0f / static_cast<float>(d);
    float mean = 0.0f;
    for (int64_t j = 0; j < d; ++j) mean += x[j];
    mean *= invd;
    float var = 0.0f;
    for (int64_t j = 0; j < d; ++j) {
        const float c = x[j] - mean;
        var += c * c;
    }
    var *= invd;
    const float invstd = 1.0f / std::sqrt(var + eps);
    for (int64_t j = 0; j < d; ++j) {
        const float xh = (x[j] - mean) * invstd;
        out[j] = gain[j] * xh + bias[j];
        if (xhat_out) xhat_out[j] = xh;
    }
    if (invstd_out) *invstd_out = invstd;
}

// Negative log-likelihood of `target` under row-wise softmax of logits.
inline float ce_row(const float* row, int64_t v, int32_t target) {
    float mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    float s = 0.0f;
    for (int64_t j = 0; j < v; ++j) s += fast_exp(row[j] - mx);
    const float lse = mx + std::log(s);
    return lse - row[target];
}

}  // namespace kern

namespace detail {

using kern::mm_acc;
using kern::mm_at_acc;
using kern::transpose_into;

inline void acc(float* dst, const float* src, int64_t n) {
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

inline void require_matrix(const Tensor& t, const char* who) {
    if (t.ndim() != 2)
        throw ShapeError(std::string(who) + " expects a 2-d tensor, got " + t.shape_string());
}

inline Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul inner dimensions disagree: " + a.shape_string() + " vs " +
                         b.shape_string());
    Tensor out = Tensor::zeros({m, n});
    detail::mm_acc(a.data(), b.data(), out.mut_data(), m, k, n);
    if (tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record(out, [a, b, out, m, k, n]() {
            const float* g = out.grad();
            if (a.requires_grad()) {
                // grad_a = g [m x n] * B^T [n x k]
                std::vector<float> bt(static_cast<size_t>(k * n));
                detail::transpose_into(b.data(), bt.data(), k, n);
                Tensor am = const_cast<Tensor&>(a);
                detail::mm_acc(g, bt.data(), am.grad_mut(), m, n, k);
            }
            if (b.requires_grad()) {
                // grad_b = A^T [k x m] * g [m x n]
                Tensor bm = const_cast<Tensor&>(b);
                detail::mm_at_acc(a.data(), g, bm.grad_mut(), m, k, n);
            }
        });
    }
    return out;
}

inline Tensor transpose2d(const Tensor& x, Tape* tape = nullptr) {
    require_matrix(x, "transpose");
    const int64_t m = x.dim(0), n = x.dim(1);
    Tensor out = Tensor::zeros({n, m});
    detail::transpose_into(x.data(), out.mut_data(), m, n);
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, m, n]() {
            Tensor xm = const_cast<Tensor&>(x);
            float* gx = xm.grad_mut();
            const float* g = out.grad();
            for (int64_t j = 0; j < n; ++j)
                for (int64_t i = 0; i < m; ++i) gx[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + " shape mismatch: " + a.shape_string() + " vs " +
                         b.shape_string());
}

inline Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    require_same_shape(a, b, "add");
    const int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
    if (tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record(out, [a, b, out, n]() {
            const float* g = out.grad();
            if (a.requires_grad()) detail::acc(const_cast<Tensor&>(a).grad_mut(), g, n);
            if (b.requires_grad()) detail::acc(const_cast<Tensor&>(b).grad_mut(), g, n);
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr) {
    require_same_shape(a, b, "mul");
    const int64_t n = a.numel();
    Tensor out = Tensor::zeros(a.shape());
    const float* pa = a.data();
    const float* pb = b.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
    if (tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record(out, [a, b, out, n]() {
            const float* g = out.grad();
            if (a.requires_grad()) {
                float* ga = const_cast<Tensor&>(a).grad_mut();
                const float* pb2 = b.data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * pb2[i];
            }
            if (b.requires_grad()) {
                float* gb = const_cast<Tensor&>(b).grad_mut();
                const float* pa2 = a.data();
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * pa2[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& x, float c, Tape* tape = nullptr) {
    const int64_t n = x.numel();
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < n; ++i) po[i] = c * px[i];
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, c, n]() {
            float* gx = const_cast<Tensor&>(x).grad_mut();
            const float* g = out.grad();
            for (int64_t i = 0; i < n; ++i) gx[i] += c * g[i];
        });
    }
    return out;
}

// out[i, :] = x[i, :] + bias   (bias broadcast over rows)
inline Tensor add_row_bias(const Tensor& x, const Tensor& bias, Tape* tape = nullptr) {
    require_matrix(x, "add_row_bias");
    if (bias.ndim() != 1 || bias.dim(0) != x.dim(1))
        throw ShapeError("add_row_bias bias " + bias.shape_string() + " does not match " +
                         x.shape_string());
    const int64_t r = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    const float* pb = bias.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < d; ++j) po[i * d + j] = px[i * d + j] + pb[j];
    if (tape && (x.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        tape->record(out, [x, bias, out, r, d]() {
            const float* g = out.grad();
            if (x.requires_grad()) detail::acc(const_cast<Tensor&>(x).grad_mut(), g, r * d);
            if (bias.requires_grad()) {
                float* gb = const_cast<Tensor&>(bias).grad_mut();
                for (int64_t i = 0; i < r; ++i)
                    for (int64_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
        });
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int64_t r0, int64_t rows, Tape* tape = nullptr) {
    require_matrix(x, "slice_rows");
    const int64_t m = x.dim(0), n = x.dim(1);
    if (r0 < 0 || rows < 0 || r0 + rows > m)
        throw ShapeError("slice_rows [" + std::to_string(r0) + ", +" + std::to_string(rows) +
                         ") out of range for " + x.shape_string());
    Tensor out = Tensor::zeros({rows, n});
    std::memcpy(out.mut_data(), x.data() + r0 * n, static_cast<size_t>(rows * n) * 4);
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, r0, rows, n]() {
            float* gx = const_cast<Tensor&>(x).grad_mut();
            detail::acc(gx + r0 * n, out.grad(), rows * n);
        });
    }
    return out;
}

inline Tensor slice_cols(const Tensor& x, int64_t c0, int64_t cols, Tape* tape = nullptr) {
    require_matrix(x, "slice_cols");
    const int64_t m = x.dim(0), n = x.dim(1);
    if (c0 < 0 || cols < 0 || c0 + cols > n)
        throw ShapeError("slice_cols [" + std::to_string(c0) + ", +" + std::to_string(cols) +
                         ") out of range for " + x.shape_string());
    Tensor out = Tensor::zeros({m, cols});
    const float* px = x.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < m; ++i)
        std::memcpy(po + i * cols, px + i * n + c0, static_cast<size_t>(cols) * 4);
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, c0, cols, m, n]() {
            float* gx = const_cast<Tensor&>(x).grad_mut();
            const float* g = out.grad();
            for (int64_t i = 0; i < m; ++i)
                for (int64_t j = 0; j < cols; ++j) gx[i * n + c0 + j] += g[i * cols + j];
        });
    }
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ContractError("concat_cols of zero tensors");
    const int64_t m = parts[0].dim(0);
    int64_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_cols");
        if (p.dim(0) != m) throw ShapeError("concat_cols row mismatch");
        total += p.dim(1);
        rg = rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({m, total});
    float* po = out.mut_data();
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t w = p.dim(1);
        const float* pp = p.data();
        for (int64_t i = 0; i < m; ++i)
            std::memcpy(po + i * total + off, pp + i * w, static_cast<size_t>(w) * 4);
        off += w;
    }
    if (tape && rg) {
        out.set_requires_grad(true);
        tape->record(out, [parts, out, m, total]() {
            const float* g = out.grad();
            int64_t off2 = 0;
            for (const Tensor& p : parts) {
                const int64_t w = p.dim(1);
                if (p.requires_grad()) {
                    float* gp = const_cast<Tensor&>(p).grad_mut();
                    for (int64_t i = 0; i < m; ++i)
                        for (int64_t j = 0; j < w; ++j) gp[i * w + j] += g[i * total + off2 + j];
                }
                off2 += w;
            }
        });
    }
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts, Tape* tape = nullptr) {
    if (parts.empty()) throw ContractError("concat_rows of zero tensors");
    const int64_t n = parts[0].dim(1);
    int64_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
        require_matrix(p, "concat_rows");
        if (p.dim(1) != n) throw ShapeError("concat_rows column mismatch");
        total += p.dim(0);
        rg = rg || p.requires_grad();
    }
    Tensor out = Tensor::zeros({total, n});
    float* po = out.mut_data();
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t r = p.dim(0);
        std::memcpy(po + off * n, p.data(), static_cast<size_t>(r * n) * 4);
        off += r;
    }
    if (tape && rg) {
        out.set_requires_grad(true);
        tape->record(out, [parts, out, n]() {
            const float* g = out.grad();
            int64_t off2 = 0;
            for (const Tensor& p : parts) {
                const int64_t r = p.dim(0);
                if (p.requires_grad())
                    detail::acc(const_cast<Tensor&>(p).grad_mut(), g + off2 * n, r * n);
                off2 += r;
            }
        });
    }
    return out;
}

// Row gather: out[t, :] = table[ids[t], :].
inline Tensor embedding_rows(const Tensor& table, std::span<const int32_t> ids,
                             Tape* tape = nullptr) {
    require_matrix(table, "embedding_rows");
    const int64_t v = table.dim(0), d = table.dim(1);
    const int64_t t = static_cast<int64_t>(ids.size());
    Tensor out = Tensor::zeros({t, d});
    const float* pt = table.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < t; ++i) {
        const int32_t id = ids[i];
        if (id < 0 || id >= v)
            throw ContractError("embedding index " + std::to_string(id) + " out of range [0, " +
                                std::to_string(v) + ")");
        std::memcpy(po + i * d, pt + static_cast<int64_t>(id) * d, static_cast<size_t>(d) * 4);
    }
    if (tape && table.requires_grad()) {
        out.set_requires_grad(true);
        std::vector<int32_t> ids_copy(ids.begin(), ids.end());
        tape->record(out, [table, out, ids_copy, d]() {
            float* gt = const_cast<Tensor&>(table).grad_mut();
            const float* g = out.grad();
            for (size_t i = 0; i < ids_copy.size(); ++i)
                detail::acc(gt + static_cast<int64_t>(ids_copy[i]) * d,
                            g + static_cast<int64_t>(i) * d, d);
        });
    }
    return out;
}

inline Tensor gelu(const Tensor& x, GeluKind kind = GeluKind::Tanh, Tape* tape = nullptr) {
    const int64_t n = x.numel();
    Tensor out = Tensor::zeros(x.shape());
    kern::gelu_buf(x.data(), out.mut_data(), n, kind);
    constexpr float kC0 = 0.7978845608028654f;  // sqrt(2/pi)
    constexpr float kC1 = 0.044715f;
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, kind, n]() {
            float* gx = const_cast<Tensor&>(x).grad_mut();
            const float* g = out.grad();
            const float* px2 = x.data();
            if (kind == GeluKind::Tanh) {
                for (int64_t i = 0; i < n; ++i) {
                    const float v = px2[i];
                    const float u = kC0 * (v + kC1 * v * v * v);
                    const float t = fast_tanh(u);
                    const float du = kC0 * (1.0f + 3.0f * kC1 * v * v);
                    const float dgdx = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
                    gx[i] += g[i] * dgdx;
                }
            } else {
                constexpr float kInvSqrt2Pi = 0.3989422804014327f;
                for (int64_t i = 0; i < n; ++i) {
                    const float v = px2[i];
                    const float cdf = 0.5f * (1.0f + std::erf(v * 0.7071067811865476f));
                    const float pdf = kInvSqrt2Pi * fast_exp(-0.5f * v * v);
                    gx[i] += g[i] * (cdf + v * pdf);
                }
            }
        });
    }
    return out;
}

// Softmax along the last axis, max-subtracted. -inf inputs map to exactly
// zero probability so causal masking stays exact.
inline Tensor softmax(const Tensor& x, int axis = -1, Tape* tape = nullptr) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis != nd - 1)
        throw ContractError("softmax supports only the last axis, got axis " +
                            std::to_string(axis) + " for " + x.shape_string());
    const int64_t cols = x.dim(nd - 1);
    if (cols < 1) throw ContractError("softmax over empty axis");
    const int64_t rows = x.numel() / cols;
    Tensor out = Tensor::zeros(x.shape());
    const float* px = x.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < rows; ++i) kern::softmax_row(px + i * cols, po + i * cols, cols);
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, rows, cols]() {
            float* gx = const_cast<Tensor&>(x).grad_mut();
            const float* g = out.grad();
            const float* y = out.data();
            for (int64_t i = 0; i < rows; ++i) {
                const float* yr = y + i * cols;
                const float* gr = g + i * cols;
                float dot = 0.0f;
                for (int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
                float* gxr = gx + i * cols;
                for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

// Per-row normalization over the last axis followed by the affine map
// gain * xhat + bias.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f,
                        Tape* tape = nullptr) {
    if (eps <= 0.0f) throw ContractError("layernorm eps must be positive");
    const int nd = x.ndim();
    const int64_t d = x.dim(nd - 1);
    if (gain.ndim() != 1 || gain.dim(0) != d || bias.ndim() != 1 || bias.dim(0) != d)
        throw ShapeError("layernorm gain/bias " + gain.shape_string() + "/" + bias.shape_string() +
                         " do not match " + x.shape_string());
    const int64_t rows = x.numel() / d;
    Tensor out = Tensor::zeros(x.shape());
    // xhat cached for backward when a tape is active.
    std::shared_ptr<std::vector<float>> xhat_keep;
    std::shared_ptr<std::vector<float>> invstd_keep;
    const bool track = tape && (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    if (track) {
        xhat_keep = std::make_shared<std::vector<float>>(static_cast<size_t>(rows * d));
        invstd_keep = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
    }
    const float* px = x.data();
    const float* pg = gain.data();
    const float* pb = bias.data();
    float* po = out.mut_data();
    for (int64_t i = 0; i < rows; ++i)
        kern::layernorm_row(px + i * d, pg, pb, po + i * d, d, eps,
                            track ? xhat_keep->data() + i * d : nullptr,
                            track ? invstd_keep->data() + i : nullptr);
    if (track) {
        out.set_requires_grad(true);
        tape->record(out, [x, gain, bias, out, xhat_keep, invstd_keep, rows, d]() {
            const float* g = out.grad();
            const float* xh = xhat_keep->data();
            const float* pg2 = gain.data();
            const float invd2 = 1.0f / static_cast<float>(d);
            if (gain.requires_grad()) {
                float* gg = const_cast<Tensor&>(gain).grad_mut();
                for (int64_t i = 0; i < rows; ++i)
                    for (int64_t j = 0; j < d; ++j) gg[j] += g[i * d + j] * xh[i * d + j];
            }
            if (bias.requires_grad()) {
                float* gb = const_cast<Tensor&>(bias).grad_mut();
                for (int64_t i = 0; i < rows; ++i)
                    for (int64_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
            }
            if (x.requires_grad()) {
                float* gx = const_cast<Tensor&>(x).grad_mut();
                for (int64_t i = 0; i < rows; ++i) {
                    const float* gr = g + i * d;
                    const float* xr = xh + i * d;
                    float mean_dxhat = 0.0f, mean_dxhat_xhat = 0.0f;
                    for (int64_t j = 0; j < d; ++j) {
                        const float dxh = gr[j] * pg2[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                    }
                    mean_dxhat *= invd2;
                    mean_dxhat_xhat *= invd2;
                    const float invstd = (*invstd_keep)[static_cast<size_t>(i)];
                    float* gxr = gx + i * d;
                    for (int64_t j = 0; j < d; ++j) {
                        const float dxh = gr[j] * pg2[j];
                        gxr[j] += invstd * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// Mean cross-entropy of row-wise logits against integer targets. Targets
// equal to ignore_index contribute nothing; if every position is ignored the
// loss is 0 and all_ignored is set instead of producing NaN.
struct CeResult {
    Tensor loss;       // scalar
    int64_t kept = 0;  // number of non-ignored positions
    bool all_ignored = false;
};

inline CeResult cross_entropy(const Tensor& logits, std::span<const int32_t> targets,
                              int32_t ignore_index = -1, Tape* tape = nullptr) {
    require_matrix(logits, "cross_entropy");
    const int64_t t = logits.dim(0), v = logits.dim(1);
    if (static_cast<int64_t>(targets.size()) != t)
        throw ShapeError("cross_entropy targets length " + std::to_string(targets.size()) +
                         " does not match logits " + logits.shape_string());
    for (int64_t i = 0; i < t; ++i) {
        const int32_t tg = targets[i];
        if (tg != ignore_index && (tg < 0 || tg >= v))
            throw ContractError("cross_entropy target " + std::to_string(tg) + " at position " +
                                std::to_string(i) + " out of range [0, " + std::to_string(v) + ")");
    }
    const bool track = tape && logits.requires_grad();
    // Probabilities cached for the backward rule.
    std::shared_ptr<std::vector<float>> probs;
    if (track) probs = std::make_shared<std::vector<float>>(static_cast<size_t>(t * v));
    const float* pl = logits.data();
    double total = 0.0;
    int64_t kept = 0;
    for (int64_t i = 0; i < t; ++i) {
        const float* row = pl + i * v;
        if (track) {
            float mx = row[0];
            for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            float s = 0.0f;
            for (int64_t j = 0; j < v; ++j) {
                const float e = fast_exp(row[j] - mx);
                (*probs)[static_cast<size_t>(i * v + j)] = e;
                s += e;
            }
            const float inv = 1.0f / s;
            for (int64_t j = 0; j < v; ++j) (*probs)[static_cast<size_t>(i * v + j)] *= inv;
            if (targets[i] == ignore_index) continue;
            const float lse = mx + std::log(s);
            total += static_cast<double>(lse - row[targets[i]]);
            ++kept;
        } else {
            if (targets[i] == ignore_index) continue;
            total += static_cast<double>(kern::ce_row(row, v, targets[i]));
            ++kept;
        }
    }
    CeResult res;
    res.kept = kept;
    res.all_ignored = (kept == 0);
    const float value = kept > 0 ? static_cast<float>(total / static_cast<double>(kept)) : 0.0f;
    res.loss = Tensor::from_data({1}, {value});
    if (track && kept > 0) {
        res.loss.set_requires_grad(true);
        std::vector<int32_t> tg(targets.begin(), targets.end());
        const Tensor loss = res.loss;
        tape->record(loss, [logits, loss, probs, tg, ignore_index, t, v, kept]() {
            float* gl = const_cast<Tensor&>(logits).grad_mut();
            const float gscale = loss.grad()[0] / static_cast<float>(kept);
            const float* p = probs->data();
            for (int64_t i = 0; i < t; ++i) {
                if (tg[static_cast<size_t>(i)] == ignore_index) continue;
                const float* pr = p + i * v;
                float* gr = gl + i * v;
                for (int64_t j = 0; j < v; ++j) gr[j] += gscale * pr[j];
                gr[tg[static_cast<size_t>(i)]] -= gscale;
            }
        });
    }
    return res;
}

inline Tensor sum(const Tensor& x, Tape* tape = nullptr) {
    const int64_t n = x.numel();
    const float* px = x.data();
    float s = 0.0f;
    for (int64_t i = 0; i < n; ++i) s += px[i];
    Tensor out = Tensor::from_data({1}, {s});
    if (tape && x.requires_grad()) {
        out.set_requires_grad(true);
        tape->record(out, [x, out, n]() {
            float* gx = const_cast<Tensor&>(x).grad_mut();
            const float g = out.grad()[0];
            for (int64_t i = 0; i < n; ++i) gx[i] += g;
        });
    }
    return out;
}

}  // namespace prodapt
