#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "cfmsep/tensor.hpp"

namespace cfmsep {
namespace detail {

// C (+)= A @ B batched over leading index; per-batch strides may be zero to
// broadcast one operand. ikj order: every output element is accumulated
// serially in k order by one thread, so results are bit-reproducible for any
// thread count and appending zero input columns leaves outputs bit-identical.
template <class S>
void gemm_batched(const S* a, const S* b, S* c, int64_t batch, int64_t m, int64_t k, int64_t n,
                  int64_t stride_a, int64_t stride_b, int64_t stride_c, bool accumulate) {
    const int64_t rows = batch * m;
    const bool heavy = rows > 1 && rows * k * n >= (1 << 14);
    (void)heavy;
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (heavy)
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const int64_t bi = r / m, i = r % m;
        const S* arow = a + bi * stride_a + i * k;
        const S* bm = b + bi * stride_b;
        S* crow = c + bi * stride_c + i * n;
        if (!accumulate) std::fill(crow, crow + n, S(0));
        for (int64_t kk = 0; kk < k; ++kk) {
            const S av = arow[kk];
            const S* bk = bm + kk * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * bk[j];
        }
    }
}

template <class S>
void gemm_nn(const S* a, const S* b, S* c, int64_t m, int64_t k, int64_t n, bool accumulate,
             bool /*parallel*/ = true) {
    gemm_batched(a, b, c, 1, m, k, n, 0, 0, 0, accumulate);
}

template <class S>
void transpose2d(const S* src, S* dst, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <class S>
void transpose_batched(const S* src, S* dst, int64_t batch, int64_t rows, int64_t cols) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (batch > 1)
#endif
    for (int64_t bi = 0; bi < batch; ++bi)
        transpose2d(src + bi * rows * cols, dst + bi * rows * cols, rows, cols);
}

template <class S>
NodePtr<S> make_node(Shape shape, const char* op) {
    auto n = std::make_shared<NodeT<S>>();
    n->shape = std::move(shape);
    n->value.resize(numel_of(n->shape));
    n->op = op;
    return n;
}

template <class S>
void check_finite(const char* op, const std::vector<S>& v) {
    for (S x : v)
        if (!std::isfinite(static_cast<double>(x)))
            throw TensorError(std::string(op) + ": non-finite output");
}

// Attach tape metadata if recording is on and any parent needs gradients.
template <class S>
TensorT<S> finish(const char* op, NodePtr<S> n, std::vector<TensorT<S>> parents,
                  std::function<void(NodeT<S>&)> bwd) {
    check_finite(op, n->value);
    bool need = false;
    if (grad_recording_flag())
        for (const auto& p : parents)
            if (p.requires_grad()) need = true;
    if (need) {
        n->requires_grad = true;
        n->parents.reserve(parents.size());
        for (auto& p : parents) n->parents.push_back(p.node());
        n->backward = std::move(bwd);
    }
    return TensorT<S>(std::move(n));
}

// Broadcast plan: per-output-axis element strides for both inputs (0 marks a
// broadcast axis). Standard trailing-aligned numpy rules.
struct BcastPlan {
    Shape out;
    std::vector<int64_t> sa, sb;
};

inline BcastPlan make_bcast(const char* op, const Shape& a, const Shape& b) {
    int nd = static_cast<int>(std::max(a.size(), b.size()));
    BcastPlan p;
    p.out.resize(nd);
    p.sa.resize(nd);
    p.sb.resize(nd);
    std::vector<int64_t> da(nd, 1), db(nd, 1);
    for (size_t i = 0; i < a.size(); ++i) da[nd - a.size() + i] = a[i];
    for (size_t i = 0; i < b.size(); ++i) db[nd - b.size() + i] = b[i];
    for (int i = 0; i < nd; ++i) {
        if (da[i] == db[i]) p.out[i] = da[i];
        else if (da[i] == 1) p.out[i] = db[i];
        else if (db[i] == 1) p.out[i] = da[i];
        else
            throw TensorError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
    }
    int64_t st = 1;
    for (int i = nd - 1; i >= 0; --i) {
        p.sa[i] = (da[i] == 1 && p.out[i] != 1) ? 0 : st;
        st *= da[i];
    }
    st = 1;
    for (int i = nd - 1; i >= 0; --i) {
        p.sb[i] = (db[i] == 1 && p.out[i] != 1) ? 0 : st;
        st *= db[i];
    }
    return p;
}

// f(out_linear_index, offset_into_a, offset_into_b) over the full output space.
template <class F>
void bcast_for_each(const BcastPlan& p, F&& f) {
    const int nd = static_cast<int>(p.out.size());
    const int64_t total = numel_of(p.out);
    if (total == 0) return;
    if (nd == 0) {
        f(int64_t(0), int64_t(0), int64_t(0));
        return;
    }
    const int64_t inner = p.out[nd - 1];
    const int64_t sa_in = p.sa[nd - 1], sb_in = p.sb[nd - 1];
    std::vector<int64_t> idx(nd, 0);
    int64_t offa = 0, offb = 0, out = 0;
    while (true) {
        for (int64_t j = 0; j < inner; ++j) f(out + j, offa + j * sa_in, offb + j * sb_in);
        out += inner;
        if (out >= total) break;
        int ax = nd - 2;
        while (true) {
            ++idx[ax];
            offa += p.sa[ax];
            offb += p.sb[ax];
            if (idx[ax] < p.out[ax]) break;
            offa -= p.sa[ax] * p.out[ax];
            offb -= p.sb[ax] * p.out[ax];
            idx[ax] = 0;
            --ax;
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops (broadcasting)
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    using namespace detail;
    if (a.shape() == b.shape()) {
        auto n = make_node<S>(a.shape(), "add");
        const auto &av = a.data(), &bv = b.data();
        for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + bv[i];
        return finish<S>("add", std::move(n), {a, b}, [](NodeT<S>& nd) {
            const auto& g = nd.grad;
            for (int pi = 0; pi < 2; ++pi) {
                auto& p = *nd.parents[pi];
                if (!p.requires_grad) continue;
                auto& pg = p.ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
            }
        });
    }
    BcastPlan plan = make_bcast("add", a.shape(), b.shape());
    auto n = make_node<S>(plan.out, "add");
    const S* ap = a.data().data();
    const S* bp = b.data().data();
    S* op = n->value.data();
    bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) { op[o] = ap[ia] + bp[ib]; });
    return finish<S>("add", std::move(n), {a, b}, [plan](NodeT<S>& nd) {
        const S* g = nd.grad.data();
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        S* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        S* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            if (ga) ga[ia] += g[o];
            if (gb) gb[ib] += g[o];
        });
    });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    using namespace detail;
    if (a.shape() == b.shape()) {
        auto n = make_node<S>(a.shape(), "sub");
        const auto &av = a.data(), &bv = b.data();
        for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] - bv[i];
        return finish<S>("sub", std::move(n), {a, b}, [](NodeT<S>& nd) {
            const auto& g = nd.grad;
            auto& pa = *nd.parents[0];
            auto& pb = *nd.parents[1];
            if (pa.requires_grad) {
                auto& ga = pa.ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (pb.requires_grad) {
                auto& gb = pb.ensure_grad();
                for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    BcastPlan plan = make_bcast("sub", a.shape(), b.shape());
    auto n = make_node<S>(plan.out, "sub");
    const S* ap = a.data().data();
    const S* bp = b.data().data();
    S* op = n->value.data();
    bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) { op[o] = ap[ia] - bp[ib]; });
    return finish<S>("sub", std::move(n), {a, b}, [plan](NodeT<S>& nd) {
        const S* g = nd.grad.data();
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        S* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        S* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            if (ga) ga[ia] += g[o];
            if (gb) gb[ib] -= g[o];
        });
    });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    using namespace detail;
    BcastPlan plan = make_bcast("mul", a.shape(), b.shape());
    auto n = make_node<S>(plan.out, "mul");
    const S* ap = a.data().data();
    const S* bp = b.data().data();
    S* op = n->value.data();
    if (a.shape() == b.shape()) {
        const int64_t total = numel_of(n->shape);
        for (int64_t i = 0; i < total; ++i) op[i] = ap[i] * bp[i];
    } else {
        bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) { op[o] = ap[ia] * bp[ib]; });
    }
    return finish<S>("mul", std::move(n), {a, b}, [plan](NodeT<S>& nd) {
        const S* g = nd.grad.data();
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        const S* av = pa.value.data();
        const S* bv = pb.value.data();
        S* ga = pa.requires_grad ? pa.ensure_grad().data() : nullptr;
        S* gb = pb.requires_grad ? pb.ensure_grad().data() : nullptr;
        bcast_for_each(plan, [&](int64_t o, int64_t ia, int64_t ib) {
            if (ga) ga[ia] += g[o] * bv[ib];
            if (gb) gb[ib] += g[o] * av[ia];
        });
    });
}

// ---------------------------------------------------------------------------
// scalar / unary ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> scale(const TensorT<S>& a, S c) {
    using namespace detail;
    auto n = make_node<S>(a.shape(), "scale");
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] * c;
    return finish<S>("scale", std::move(n), {a}, [c](NodeT<S>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        for (size_t i = 0; i < nd.grad.size(); ++i) pg[i] += nd.grad[i] * c;
    });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, S c) {
    using namespace detail;
    auto n = make_node<S>(a.shape(), "add_scalar");
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = av[i] + c;
    return finish<S>("add_scalar", std::move(n), {a}, [](NodeT<S>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        for (size_t i = 0; i < nd.grad.size(); ++i) pg[i] += nd.grad[i];
    });
}

template <class S>
TensorT<S> neg(const TensorT<S>& a) {
    return scale(a, S(-1));
}

template <class S>
TensorT<S> silu(const TensorT<S>& a) {
    using namespace detail;
    auto n = make_node<S>(a.shape(), "silu");
    const auto& av = a.data();
    std::vector<S> sig(av.size());
    for (size_t i = 0; i < av.size(); ++i) {
        sig[i] = S(1) / (S(1) + std::exp(-av[i]));
        n->value[i] = av[i] * sig[i];
    }
    return finish<S>("silu", std::move(n), {a}, [sig = std::move(sig)](NodeT<S>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const auto& av = p.value;
        for (size_t i = 0; i < nd.grad.size(); ++i) {
            const S s = sig[i];
            pg[i] += nd.grad[i] * (s * (S(1) + av[i] * (S(1) - s)));
        }
    });
}

template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
    using namespace detail;
    auto n = make_node<S>(a.shape(), "gelu");
    const auto& av = a.data();
    const S inv_sqrt2 = static_cast<S>(0.70710678118654752440);
    std::vector<S> cdf(av.size());
    for (size_t i = 0; i < av.size(); ++i) {
        cdf[i] = S(0.5) * (S(1) + std::erf(av[i] * inv_sqrt2));
        n->value[i] = av[i] * cdf[i];
    }
    return finish<S>("gelu", std::move(n), {a}, [cdf = std::move(cdf)](NodeT<S>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const auto& av = p.value;
        const S inv_sqrt2pi = static_cast<S>(0.39894228040143267794);
        for (size_t i = 0; i < nd.grad.size(); ++i) {
            const S x = av[i];
            const S pdf = inv_sqrt2pi * std::exp(S(-0.5) * x * x);
            pg[i] += nd.grad[i] * (cdf[i] + x * pdf);
        }
    });
}

template <class S>
TensorT<S> log_op(const TensorT<S>& a) {
    using namespace detail;
    auto n = make_node<S>(a.shape(), "log");
    const auto& av = a.data();
    for (size_t i = 0; i < av.size(); ++i) n->value[i] = static_cast<S>(std::log(static_cast<double>(av[i])));
    return finish<S>("log", std::move(n), {a}, [](NodeT<S>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const auto& av = p.value;
        for (size_t i = 0; i < nd.grad.size(); ++i) pg[i] += nd.grad[i] / av[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
    using namespace detail;
    if (numel_of(shape) != a.numel())
        throw TensorError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto n = make_node<S>(std::move(shape), "reshape");
    n->value = a.data();
    return finish<S>("reshape", std::move(n), {a}, [](NodeT<S>& nd) {
        auto& p = *nd.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        for (size_t i = 0; i < nd.grad.size(); ++i) pg[i] += nd.grad[i];
    });
}

namespace detail {
template <class S>
void permute_raw(const S* src, const Shape& in_shape, const std::vector<int>& axes, S* dst) {
    const int nd = static_cast<int>(in_shape.size());
    Shape out_shape(nd);
    for (int i = 0; i < nd; ++i) out_shape[i] = in_shape[axes[i]];
    std::vector<int64_t> out_strides(nd);
    int64_t st = 1;
    for (int i = nd - 1; i >= 0; --i) {
        out_strides[i] = st;
        st *= out_shape[i];
    }
    // stride of the output location as we walk the *input* linearly
    std::vector<int64_t> dst_stride_for_in(nd);
    for (int o = 0; o < nd; ++o) dst_stride_for_in[axes[o]] = out_strides[o];
    std::vector<int64_t> idx(nd, 0);
    int64_t total = numel_of(in_shape);
    int64_t doff = 0;
    for (int64_t i = 0; i < total; ++i) {
        dst[doff] = src[i];
        for (int ax = nd - 1; ax >= 0; --ax) {
            ++idx[ax];
            doff += dst_stride_for_in[ax];
            if (idx[ax] < in_shape[ax]) break;
            doff -= dst_stride_for_in[ax] * in_shape[ax];
            idx[ax] = 0;
        }
    }
}
}  // namespace detail

template <class S>
TensorT<S> permute(const TensorT<S>& a, std::vector<int> axes) {
    using namespace detail;
    const int nd = a.ndim();
    if (static_cast<int>(axes.size()) != nd) throw TensorError("permute: axes rank mismatch");
    Shape out(nd);
    for (int i = 0; i < nd; ++i) out[i] = a.shape()[axes[i]];
    auto n = make_node<S>(out, "permute");
    permute_raw(a.data().data(), a.shape(), axes, n->value.data());
    std::vector<int> inverse(nd);
    for (int i = 0; i < nd; ++i) inverse[axes[i]] = i;
    Shape out_shape = out;
    return finish<S>("permute", std::move(n), {a}, [inverse, out_shape](NodeT<S>& nd_) {
        auto& p = *nd_.parents[0];
        if (!p.requires_grad) return;
        std::vector<S> tmp(nd_.grad.size());
        detail::permute_raw(nd_.grad.data(), out_shape, inverse, tmp.data());
        auto& pg = p.ensure_grad();
        for (size_t i = 0; i < tmp.size(); ++i) pg[i] += tmp[i];
    });
}

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& xs, int axis) {
    using namespace detail;
    if (xs.empty()) throw TensorError("concat: empty input list");
    const int nd = xs[0].ndim();
    if (axis < 0) axis += nd;
    Shape out = xs[0].shape();
    int64_t axis_total = 0;
    for (const auto& x : xs) {
        if (x.ndim() != nd) throw TensorError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && x.shape()[i] != out[i])
                throw TensorError("concat: shape mismatch " + shape_str(out) + " vs " +
                                  shape_str(x.shape()));
        axis_total += x.shape()[axis];
    }
    out[axis] = axis_total;
    auto n = make_node<S>(out, "concat");
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out[i];
    for (int i = axis + 1; i < nd; ++i) inner *= out[i];
    const int64_t out_row = axis_total * inner;
    int64_t off = 0;
    std::vector<int64_t> blocks;
    for (const auto& x : xs) {
        const int64_t blk = x.shape()[axis] * inner;
        blocks.push_back(blk);
        const S* src = x.data().data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(n->value.data() + o * out_row + off, src + o * blk, sizeof(S) * blk);
        off += blk;
    }
    std::vector<TensorT<S>> parents(xs);
    return finish<S>("concat", std::move(n), std::move(parents),
                     [outer, out_row, blocks](NodeT<S>& nd_) {
                         int64_t off2 = 0;
                         for (size_t pi = 0; pi < nd_.parents.size(); ++pi) {
                             auto& p = *nd_.parents[pi];
                             const int64_t blk = blocks[pi];
                             if (p.requires_grad) {
                                 auto& pg = p.ensure_grad();
                                 for (int64_t o = 0; o < outer; ++o) {
                                     const S* g = nd_.grad.data() + o * out_row + off2;
                                     S* dst = pg.data() + o * blk;
                                     for (int64_t i = 0; i < blk; ++i) dst[i] += g[i];
                                 }
                             }
                             off2 += blk;
                         }
                     });
}

template <class S>
std::vector<TensorT<S>> split(const TensorT<S>& a, int axis, const std::vector<int64_t>& sizes) {
    using namespace detail;
    const int nd = a.ndim();
    if (axis < 0) axis += nd;
    int64_t total = 0;
    for (int64_t s : sizes) total += s;
    if (total != a.shape()[axis])
        throw TensorError("split: sizes do not cover axis of " + shape_str(a.shape()));
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
    const int64_t in_row = a.shape()[axis] * inner;
    std::vector<TensorT<S>> out;
    int64_t off = 0;
    for (int64_t s : sizes) {
        Shape shp = a.shape();
        shp[axis] = s;
        auto n = make_node<S>(shp, "split");
        const int64_t blk = s * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(n->value.data() + o * blk, a.data().data() + o * in_row + off,
                        sizeof(S) * blk);
        const int64_t off_c = off;
        out.push_back(finish<S>("split", std::move(n), {a},
                                [outer, in_row, blk, off_c](NodeT<S>& nd_) {
                                    auto& p = *nd_.parents[0];
                                    if (!p.requires_grad) return;
                                    auto& pg = p.ensure_grad();
                                    for (int64_t o = 0; o < outer; ++o) {
                                        const S* g = nd_.grad.data() + o * blk;
                                        S* dst = pg.data() + o * in_row + off_c;
                                        for (int64_t i = 0; i < blk; ++i) dst[i] += g[i];
                                    }
                                }));
        off += blk;
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// A [..., M, K] @ B [..., K, N]. Either operand may be rank-2 while the other
// carries leading batch axes; otherwise leading axes must match exactly.
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    using namespace detail;
    if (a.ndim() < 2 || b.ndim() < 2)
        throw TensorError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                          " and " + shape_str(b.shape()));
    const int64_t M = a.dim(-2), K = a.dim(-1);
    const int64_t Kb = b.dim(-2), N = b.dim(-1);
    if (K != Kb)
        throw TensorError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));

    // batch layout: sa/sb/sc are per-batch element strides (0 broadcasts)
    int64_t batch, sa, sb;
    Shape out;
    if (b.ndim() == 2) {
        batch = 1;  // flatten all leading axes of A into rows of one gemm
        out = a.shape();
        out.back() = N;
        sa = 0;
        sb = 0;
    } else if (a.ndim() == 2) {
        batch = b.numel() / (K * N);
        out = b.shape();
        out[out.size() - 2] = M;
        sa = 0;
        sb = K * N;
    } else {
        if (a.ndim() != b.ndim())
            throw TensorError("matmul: rank mismatch " + shape_str(a.shape()) + " vs " +
                              shape_str(b.shape()));
        for (int i = 0; i < a.ndim() - 2; ++i)
            if (a.shape()[i] != b.shape()[i])
                throw TensorError("matmul: batch shape mismatch " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
        batch = a.numel() / (M * K);
        out = a.shape();
        out.back() = N;
        sa = M * K;
        sb = K * N;
    }
    const int64_t rows = b.ndim() == 2 ? a.numel() / K : M;  // rows per batch entry
    const int64_t sc = rows * N;

    auto n = make_node<S>(out, "matmul");
    // the freshly resized value buffer is already zero, so accumulate directly
    gemm_batched(a.data().data(), b.data().data(), n->value.data(), batch, rows, K, N, sa, sb,
                 batch == 1 ? 0 : sc, true);

    return finish<S>("matmul", std::move(n), {a, b},
                     [batch, rows, K, N, sa, sb, sc](NodeT<S>& nd_) {
                         auto& pa = *nd_.parents[0];
                         auto& pb = *nd_.parents[1];
                         const int64_t bsz = K * N;
                         if (pa.requires_grad) {
                             // dA = dC @ B^T, batched
                             std::vector<S> bt(sb == 0 ? bsz : batch * bsz);
                             transpose_batched(pb.value.data(), bt.data(), sb == 0 ? 1 : batch, K,
                                               N);
                             S* ga = pa.ensure_grad().data();
                             if (sa == 0 && batch > 1) {
                                 // broadcast A accumulates across batches; keep serial
                                 for (int64_t bi = 0; bi < batch; ++bi)
                                     gemm_batched(nd_.grad.data() + bi * sc,
                                                  bt.data() + (sb == 0 ? 0 : bi * bsz), ga, 1,
                                                  rows, N, K, 0, 0, 0, true);
                             } else {
                                 gemm_batched(nd_.grad.data(), bt.data(), ga, batch, rows, N, K,
                                              batch == 1 ? 0 : sc, sb == 0 ? 0 : bsz, sa, true);
                             }
                         }
                         if (pb.requires_grad) {
                             auto& gb = pb.ensure_grad();
                             if (sb == 0) {
                                 // shared weight: dB = A_flat^T @ dC_flat
                                 const int64_t R = batch * rows;
                                 std::vector<S> at(static_cast<size_t>(K) * R);
                                 transpose2d(pa.value.data(), at.data(), R, K);
                                 gemm_batched(at.data(), nd_.grad.data(), gb.data(), 1, K, R, N, 0,
                                              0, 0, true);
                             } else if (sa == 0) {
                                 // shared A: dB_b = A^T @ dC_b
                                 const int64_t M2 = rows;
                                 std::vector<S> at(static_cast<size_t>(K) * M2);
                                 transpose2d(pa.value.data(), at.data(), M2, K);
                                 gemm_batched(at.data(), nd_.grad.data(), gb.data(), batch, K, M2,
                                              N, 0, sc, bsz, true);
                             } else {
                                 // dB_b = A_b^T @ dC_b
                                 std::vector<S> at(static_cast<size_t>(batch) * sa);
                                 transpose_batched(pa.value.data(), at.data(), batch, rows, K);
                                 gemm_batched(at.data(), nd_.grad.data(), gb.data(), batch, K,
                                              rows, N, sa, sc, bsz, true);
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// normalization / reductions
// ---------------------------------------------------------------------------

template <class S>
TensorT<S> softmax_lastdim(const TensorT<S>& a) {
    using namespace detail;
    const int64_t n_last = a.dim(-1);
    const int64_t rows = a.numel() / n_last;
    auto n = make_node<S>(a.shape(), "softmax");
    const S* x = a.data().data();
    S* y = n->value.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 64)
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * n_last;
        S* yr = y + r * n_last;
        S m = xr[0];
        for (int64_t i = 1; i < n_last; ++i) m = std::max(m, xr[i]);
        S sum = S(0);
        for (int64_t i = 0; i < n_last; ++i) {
            yr[i] = std::exp(xr[i] - m);
            sum += yr[i];
        }
        const S inv = S(1) / sum;
        for (int64_t i = 0; i < n_last; ++i) yr[i] *= inv;
    }
    return finish<S>("softmax", std::move(n), {a}, [rows, n_last](NodeT<S>& nd_) {
        auto& p = *nd_.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const S* y = nd_.value.data();
        const S* g = nd_.grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 64)
#endif
        for (int64_t r = 0; r < rows; ++r) {
            const S* yr = y + r * n_last;
            const S* gr = g + r * n_last;
            S* pr = pg.data() + r * n_last;
            S dot = S(0);
            for (int64_t i = 0; i < n_last; ++i) dot += gr[i] * yr[i];
            for (int64_t i = 0; i < n_last; ++i) pr[i] += yr[i] * (gr[i] - dot);
        }
    });
}

template <class S>
TensorT<S> log_softmax_lastdim(const TensorT<S>& a) {
    using namespace detail;
    const int64_t n_last = a.dim(-1);
    const int64_t rows = a.numel() / n_last;
    auto n = make_node<S>(a.shape(), "log_softmax");
    const S* x = a.data().data();
    S* y = n->value.data();
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * n_last;
        S* yr = y + r * n_last;
        S m = xr[0];
        for (int64_t i = 1; i < n_last; ++i) m = std::max(m, xr[i]);
        double sum = 0;
        for (int64_t i = 0; i < n_last; ++i) sum += std::exp(static_cast<double>(xr[i] - m));
        const S lse = m + static_cast<S>(std::log(sum));
        for (int64_t i = 0; i < n_last; ++i) yr[i] = xr[i] - lse;
    }
    return finish<S>("log_softmax", std::move(n), {a}, [rows, n_last](NodeT<S>& nd_) {
        auto& p = *nd_.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const S* y = nd_.value.data();
        const S* g = nd_.grad.data();
        for (int64_t r = 0; r < rows; ++r) {
            const S* yr = y + r * n_last;
            const S* gr = g + r * n_last;
            S* pr = pg.data() + r * n_last;
            S gsum = S(0);
            for (int64_t i = 0; i < n_last; ++i) gsum += gr[i];
            for (int64_t i = 0; i < n_last; ++i)
                pr[i] += gr[i] - static_cast<S>(std::exp(static_cast<double>(yr[i]))) * gsum;
        }
    });
}

// LayerNorm over the last axis, no learned affine. A constant row normalizes
// to zeros through the eps floor.
template <class S>
TensorT<S> layer_norm_lastdim(const TensorT<S>& a, double eps = 1e-5) {
    using namespace detail;
    const int64_t n_last = a.dim(-1);
    const int64_t rows = a.numel() / n_last;
    auto n = make_node<S>(a.shape(), "layer_norm");
    std::vector<S> inv_std(rows);
    const S* x = a.data().data();
    S* y = n->value.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 64)
#endif
    for (int64_t r = 0; r < rows; ++r) {
        const S* xr = x + r * n_last;
        S* yr = y + r * n_last;
        S mean = S(0);
        for (int64_t i = 0; i < n_last; ++i) mean += xr[i];
        mean /= static_cast<S>(n_last);
        S var = S(0);
        for (int64_t i = 0; i < n_last; ++i) {
            const S d = xr[i] - mean;
            var += d * d;
        }
        var /= static_cast<S>(n_last);
        const S inv = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var) + eps));
        inv_std[r] = inv;
        for (int64_t i = 0; i < n_last; ++i) yr[i] = (xr[i] - mean) * inv;
    }
    return finish<S>("layer_norm", std::move(n), {a},
                     [rows, n_last, inv_std = std::move(inv_std)](NodeT<S>& nd_) {
                         auto& p = *nd_.parents[0];
                         if (!p.requires_grad) return;
                         auto& pg = p.ensure_grad();
                         const S* y = nd_.value.data();
                         const S* g = nd_.grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (rows > 64)
#endif
                         for (int64_t r = 0; r < rows; ++r) {
                             const S* yr = y + r * n_last;
                             const S* gr = g + r * n_last;
                             S* pr = pg.data() + r * n_last;
                             S gmean = S(0), gymean = S(0);
                             for (int64_t i = 0; i < n_last; ++i) {
                                 gmean += gr[i];
                                 gymean += gr[i] * yr[i];
                             }
                             gmean /= static_cast<S>(n_last);
                             gymean /= static_cast<S>(n_last);
                             const S inv = inv_std[r];
                             for (int64_t i = 0; i < n_last; ++i)
                                 pr[i] += inv * (gr[i] - gmean - yr[i] * gymean);
                         }
                     });
}

template <class S>
TensorT<S> mean_axis(const TensorT<S>& a, int axis) {
    using namespace detail;
    const int nd = a.ndim();
    if (axis < 0) axis += nd;
    Shape out;
    for (int i = 0; i < nd; ++i)
        if (i != axis) out.push_back(a.shape()[i]);
    int64_t outer = 1, inner = 1;
    const int64_t red = a.shape()[axis];
    for (int i = 0; i < axis; ++i) outer *= a.shape()[i];
    for (int i = axis + 1; i < nd; ++i) inner *= a.shape()[i];
    auto n = make_node<S>(out, "mean_axis");
    const S* x = a.data().data();
    S* y = n->value.data();
    const S invr = S(1) / static_cast<S>(red);
    for (int64_t o = 0; o < outer; ++o) {
        S* yo = y + o * inner;
        std::fill(yo, yo + inner, S(0));
        const S* xo = x + o * red * inner;
        for (int64_t k = 0; k < red; ++k)
            for (int64_t i = 0; i < inner; ++i) yo[i] += xo[k * inner + i];
        for (int64_t i = 0; i < inner; ++i) yo[i] *= invr;
    }
    return finish<S>("mean_axis", std::move(n), {a}, [outer, red, inner, invr](NodeT<S>& nd_) {
        auto& p = *nd_.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const S* g = nd_.grad.data();
        for (int64_t o = 0; o < outer; ++o) {
            const S* go = g + o * inner;
            S* po = pg.data() + o * red * inner;
            for (int64_t k = 0; k < red; ++k)
                for (int64_t i = 0; i < inner; ++i) po[k * inner + i] += go[i] * invr;
        }
    });
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    using namespace detail;
    auto n = make_node<S>(Shape{}, "sum_all");
    S acc = S(0);
    for (S v : a.data()) acc += v;
    n->value[0] = acc;
    return finish<S>("sum_all", std::move(n), {a}, [](NodeT<S>& nd_) {
        auto& p = *nd_.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const S g = nd_.grad[0];
        for (auto& v : pg) v += g;
    });
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& a) {
    using namespace detail;
    auto n = make_node<S>(Shape{}, "mean_all");
    S acc = S(0);
    for (S v : a.data()) acc += v;
    const S invn = S(1) / static_cast<S>(a.numel());
    n->value[0] = acc * invn;
    return finish<S>("mean_all", std::move(n), {a}, [invn](NodeT<S>& nd_) {
        auto& p = *nd_.parents[0];
        if (!p.requires_grad) return;
        auto& pg = p.ensure_grad();
        const S g = nd_.grad[0] * invn;
        for (auto& v : pg) v += g;
    });
}

// Mean squared error over every element.
template <class S>
TensorT<S> mse(const TensorT<S>& a, const TensorT<S>& b) {
    using namespace detail;
    if (a.shape() != b.shape())
        throw TensorError("mse: shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
    auto n = make_node<S>(Shape{}, "mse");
    const auto &av = a.data(), &bv = b.data();
    double acc = 0;
    for (size_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
        acc += d * d;
    }
    n->value[0] = static_cast<S>(acc / static_cast<double>(av.size()));
    return finish<S>("mse", std::move(n), {a, b}, [](NodeT<S>& nd_) {
        auto& pa = *nd_.parents[0];
        auto& pb = *nd_.parents[1];
        const auto& av = pa.value;
        const auto& bv = pb.value;
        const S c = nd_.grad[0] * S(2) / static_cast<S>(av.size());
        if (pa.requires_grad) {
            auto& ga = pa.ensure_grad();
            for (size_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - bv[i]);
        }
        if (pb.requires_grad) {
            auto& gb = pb.ensure_grad();
            for (size_t i = 0; i < av.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// small helpers used across modules and tests
// ---------------------------------------------------------------------------

template <class S>
double max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) throw TensorError("max_abs_diff: shape mismatch");
    double m = 0;
    for (size_t i = 0; i < a.data().size(); ++i)
        m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
    return m;
}

template <class S>
bool bitwise_equal(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.data().size() * sizeof(S)) == 0;
}

template <class S>
TensorT<S> from_float_vec(const std::vector<float>& v, Shape shape) {
    std::vector<S> d(v.size());
    for (size_t i = 0; i < v.size(); ++i) d[i] = static_cast<S>(v[i]);
    return TensorT<S>::from_data(std::move(shape), std::move(d));
}

}  // namespace cfmsep
