#pragma once

#include <cmath>
#include <vector>

#include "hspec/tensor.hpp"

// Neural-net ops on 2-D tensors. Batch and sequence dims are flattened
// into rows; the attention op is told how to re-block them.

namespace hspec {

// y = x * W^T (+ b)   x:[N x in]  W:[out x in]  b:[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
    if (x.ndim() != 2 || w.ndim() != 2) throw ShapeError("linear: 2-D tensors required");
    const int rows = x.dim(0), in = x.dim(1), out = w.dim(0);
    if (w.dim(1) != in) throw ShapeError("linear: weight width does not match input");
    if (b && (b->ndim() != 1 || b->dim(0) != out)) throw ShapeError("linear: bad bias shape");
    std::vector<T> y(size_t(rows) * out);
    kern::gemm_nt(x.ptr(), w.ptr(), y.data(), rows, out, in);
    if (b) {
        const T* bp = b->ptr();
        for (int r = 0; r < rows; ++r)
            for (int o = 0; o < out; ++o) y[size_t(r) * out + o] += bp[o];
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b ? b->node() : nullptr;
    std::vector<Tensor<T>> inputs = {x, w};
    if (b) inputs.push_back(*b);
    return Tensor<T>::make_op({rows, out}, std::move(y), std::move(inputs),
                              [xn, wn, bn, rows, in, out](auto& node) {
                                  if (xn->requires_grad) {
                                      xn->ensure_grad();
                                      kern::gemm_nn(node.grad.data(), wn->value.data(),
                                                    xn->grad.data(), rows, in, out, true);
                                  }
                                  if (wn->requires_grad) {
                                      wn->ensure_grad();
                                      kern::gemm_tn_acc(node.grad.data(), xn->value.data(),
                                                        wn->grad.data(), rows, in, out);
                                  }
                                  if (bn && bn->requires_grad) {
                                      bn->ensure_grad();
                                      for (int r = 0; r < rows; ++r)
                                          for (int o = 0; o < out; ++o)
                                              bn->grad[size_t(o)] += node.grad[size_t(r) * out + o];
                                  }
                              });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
    std::vector<T> y(x.numel());
    for (size_t i = 0; i < y.size(); ++i) {
        const T v = x.data()[i];
        y[i] = v / (T(1) + std::exp(-v));
    }
    auto xn = x.node();
    return Tensor<T>::make_op(x.shape(), std::move(y), {x}, [xn](auto& node) {
        xn->ensure_grad();
        for (size_t i = 0; i < node.grad.size(); ++i) {
            const T v = xn->value[i];
            const T s = T(1) / (T(1) + std::exp(-v));
            xn->grad[i] += node.grad[i] * s * (T(1) + v * (T(1) - s));
        }
    });
}

// Row-wise layer norm with learned gain/bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    if (x.ndim() != 2) throw ShapeError("layer_norm: 2-D input required");
    const int rows = x.dim(0), d = x.dim(1);
    if (gain.numel() != size_t(d) || bias.numel() != size_t(d))
        throw ShapeError("layer_norm: gain/bias width mismatch");
    std::vector<T> y(x.numel());
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto rstd = std::make_shared<std::vector<T>>(size_t(rows));
    for (int r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + size_t(r) * d;
        T mu = 0;
        for (int j = 0; j < d; ++j) mu += xr[j];
        mu /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[size_t(r)] = rs;
        for (int j = 0; j < d; ++j) {
            const T xh = (xr[j] - mu) * rs;
            (*xhat)[size_t(r) * d + j] = xh;
            y[size_t(r) * d + j] = gain.data()[size_t(j)] * xh + bias.data()[size_t(j)];
        }
    }
    auto xn = x.node();
    auto gn = gain.node();
    auto bn = bias.node();
    return Tensor<T>::make_op(
        x.shape(), std::move(y), {x, gain, bias}, [xn, gn, bn, xhat, rstd, rows, d](auto& node) {
            for (int r = 0; r < rows; ++r) {
                const T* dy = node.grad.data() + size_t(r) * d;
                const T* xh = xhat->data() + size_t(r) * d;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (int j = 0; j < d; ++j) gn->grad[size_t(j)] += dy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (int j = 0; j < d; ++j) bn->grad[size_t(j)] += dy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    T m1 = 0, m2 = 0;  // mean(dxhat), mean(dxhat * xhat)
                    for (int j = 0; j < d; ++j) {
                        const T dxh = dy[j] * gn->value[size_t(j)];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= T(d);
                    m2 /= T(d);
                    const T rs = (*rstd)[size_t(r)];
                    T* dx = xn->grad.data() + size_t(r) * d;
                    for (int j = 0; j < d; ++j) {
                        const T dxh = dy[j] * gn->value[size_t(j)];
                        dx[j] += rs * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        });
}

// Row-wise softmax with temperature; max-subtracted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, T temperature = T(1)) {
    if (temperature <= T(0)) throw InputError("softmax: temperature must be positive");
    const int d = x.dim(int(x.ndim()) - 1);
    const int rows = int(x.numel() / size_t(d));
    std::vector<T> y(x.numel());
    for (int r = 0; r < rows; ++r) {
        const T* xr = x.ptr() + size_t(r) * d;
        T mx = xr[0];
        for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        if (!std::isfinite(double(mx))) throw NumericError("softmax: non-finite input");
        T sum = 0;
        for (int j = 0; j < d; ++j) {
            const T e = std::exp((xr[j] - mx) / temperature);
            y[size_t(r) * d + j] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < d; ++j) y[size_t(r) * d + j] *= inv;
    }
    auto xn = x.node();
    auto yv = std::make_shared<std::vector<T>>(y);
    return Tensor<T>::make_op(x.shape(), std::move(y), {x},
                              [xn, yv, rows, d, temperature](auto& node) {
                                  xn->ensure_grad();
                                  for (int r = 0; r < rows; ++r) {
                                      const T* dy = node.grad.data() + size_t(r) * d;
                                      const T* yr = yv->data() + size_t(r) * d;
                                      T dotv = 0;
                                      for (int j = 0; j < d; ++j) dotv += dy[j] * yr[j];
                                      T* dx = xn->grad.data() + size_t(r) * d;
                                      for (int j = 0; j < d; ++j)
                                          dx[j] += yr[j] * (dy[j] - dotv) / temperature;
                                  }
                              });
}

namespace detail {

template <typename T>
void log_softmax_row(const T* x, T* out, int d) {
    T mx = x[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, x[j]);
    T sum = 0;
    for (int j = 0; j < d; ++j) sum += std::exp(x[j] - mx);
    const T lse = mx + std::log(sum);
    for (int j = 0; j < d; ++j) out[j] = x[j] - lse;
}

}  // namespace detail

// Mean over rows of -sum(target * log_softmax(logits)). Hard targets are
// the one-hot special case (see cross_entropy below).
template <typename T>
Tensor<T> cross_entropy_soft(const Tensor<T>& logits, const Tensor<T>& target) {
    if (logits.shape() != target.shape() || logits.ndim() != 2)
        throw ShapeError("cross_entropy_soft: [N x V] logits/target required");
    const int rows = logits.dim(0), d = logits.dim(1);
    std::vector<T> lsm(logits.numel());
    T loss = 0;
    for (int r = 0; r < rows; ++r) {
        const T* tr = target.ptr() + size_t(r) * d;
        double tsum = 0;  // accumulate wide so the check tests the values
        for (int j = 0; j < d; ++j) tsum += double(tr[j]);
        if (std::abs(tsum - 1.0) > 1e-5)
            throw InputError("cross_entropy_soft: target row does not sum to 1");
        detail::log_softmax_row(logits.ptr() + size_t(r) * d, lsm.data() + size_t(r) * d, d);
        T rowloss = 0;
        for (int j = 0; j < d; ++j) rowloss -= tr[j] * lsm[size_t(r) * d + j];
        loss += rowloss;
    }
    loss /= T(rows);
    auto ln = logits.node();
    auto tn = target.node();
    auto lsmv = std::make_shared<std::vector<T>>(std::move(lsm));
    return Tensor<T>::make_op({1}, {loss}, {logits, target}, [ln, tn, lsmv, rows, d](auto& node) {
        const T g = node.grad[0] / T(rows);
        if (ln->requires_grad) {
            ln->ensure_grad();
            for (int r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j) {
                    const size_t i = size_t(r) * d + j;
                    ln->grad[i] += g * (std::exp((*lsmv)[i]) - tn->value[i]);
                }
        }
        if (tn->requires_grad) {
            tn->ensure_grad();
            for (size_t i = 0; i < tn->grad.size(); ++i) tn->grad[i] -= g * (*lsmv)[i];
        }
    });
}

// Mean over rows of -log_softmax(logits)[id].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& ids) {
    if (logits.ndim() != 2 || size_t(logits.dim(0)) != ids.size())
        throw ShapeError("cross_entropy: one target id per logits row required");
    const int rows = logits.dim(0), d = logits.dim(1);
    std::vector<T> lsm(logits.numel());
    T loss = 0;
    for (int r = 0; r < rows; ++r) {
        if (ids[size_t(r)] < 0 || ids[size_t(r)] >= d) throw InputError("cross_entropy: id out of range");
        detail::log_softmax_row(logits.ptr() + size_t(r) * d, lsm.data() + size_t(r) * d, d);
        loss -= lsm[size_t(r) * d + ids[size_t(r)]];
    }
    loss /= T(rows);
    auto ln = logits.node();
    auto lsmv = std::make_shared<std::vector<T>>(std::move(lsm));
    auto idv = std::make_shared<std::vector<int>>(ids);
    return Tensor<T>::make_op({1}, {loss}, {logits}, [ln, lsmv, idv, rows, d](auto& node) {
        ln->ensure_grad();
        const T g = node.grad[0] / T(rows);
        for (int r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) {
                const size_t i = size_t(r) * d + j;
                ln->grad[i] += g * (std::exp((*lsmv)[i]) - T(j == (*idv)[size_t(r)] ? 1 : 0));
            }
    });
}

// Row gather; covers embedding lookup (x = table) and anchor selection.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
    if (x.ndim() != 2) throw ShapeError("gather_rows: 2-D input required");
    const int rows = x.dim(0), d = x.dim(1);
    std::vector<T> y(idx.size() * size_t(d));
    for (size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || idx[r] >= rows) throw InputError("gather_rows: index out of range");
        const T* src = x.ptr() + size_t(idx[r]) * d;
        std::copy(src, src + d, y.data() + r * size_t(d));
    }
    auto xn = x.node();
    auto idv = std::make_shared<std::vector<int>>(idx);
    return Tensor<T>::make_op({int(idx.size()), d}, std::move(y), {x}, [xn, idv, d](auto& node) {
        xn->ensure_grad();
        for (size_t r = 0; r < idv->size(); ++r)
            kern::axpy(T(1), node.grad.data() + r * size_t(d),
                       xn->grad.data() + size_t((*idv)[r]) * d, d);
    });
}

template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw InputError("concat_cols: no inputs");
    const int rows = xs[0].dim(0);
    int total = 0;
    for (const auto& x : xs) {
        if (x.ndim() != 2 || x.dim(0) != rows) throw ShapeError("concat_cols: row count mismatch");
        total += x.dim(1);
    }
    std::vector<T> y(size_t(rows) * total);
    int off = 0;
    for (const auto& x : xs) {
        const int d = x.dim(1);
        for (int r = 0; r < rows; ++r)
            std::copy(x.ptr() + size_t(r) * d, x.ptr() + size_t(r) * d + d,
                      y.data() + size_t(r) * total + off);
        off += d;
    }
    std::vector<std::shared_ptr<typename Tensor<T>::Node>> nodes;
    for (const auto& x : xs) nodes.push_back(x.node());
    return Tensor<T>::make_op({rows, total}, std::move(y), xs, [nodes, rows, total](auto& node) {
        int off2 = 0;
        for (auto& pn : nodes) {
            const int d = pn->shape[1];
            if (pn->requires_grad) {
                pn->ensure_grad();
                for (int r = 0; r < rows; ++r)
                    kern::axpy(T(1), node.grad.data() + size_t(r) * total + off2,
                               pn->grad.data() + size_t(r) * d, d);
            }
            off2 += d;
        }
    });
}

// Fused multi-head causal self-attention over flattened [B*L x d] rows.
// Head h owns the contiguous column block [h*hd, (h+1)*hd).
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int batch,
                           int heads) {
    if (q.shape() != k.shape() || q.shape() != v.shape() || q.ndim() != 2)
        throw ShapeError("causal_attention: q/k/v shape mismatch");
    const int rows = q.dim(0), d = q.dim(1);
    if (rows % batch != 0 || d % heads != 0) throw ShapeError("causal_attention: bad blocking");
    const int L = rows / batch, hd = d / heads;
    const T scl = T(1) / std::sqrt(T(hd));

    std::vector<T> out(size_t(rows) * d, T(0));
    // Attention probabilities kept for backward: [batch][head] lower-triangular rows.
    auto probs = std::make_shared<std::vector<T>>(size_t(batch) * heads * L * L, T(0));
    std::vector<T> scores(static_cast<size_t>(L));
    for (int b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const size_t base = (size_t(b) * heads + h) * L * L;
            for (int i = 0; i < L; ++i) {
                const T* qi = q.ptr() + size_t(b * L + i) * d + size_t(h) * hd;
                T mx = -std::numeric_limits<T>::infinity();
                for (int j = 0; j <= i; ++j) {
                    const T* kj = k.ptr() + size_t(b * L + j) * d + size_t(h) * hd;
                    scores[size_t(j)] = kern::dot(qi, kj, hd) * scl;
                    mx = std::max(mx, scores[size_t(j)]);
                }
                T sum = 0;
                for (int j = 0; j <= i; ++j) {
                    const T e = std::exp(scores[size_t(j)] - mx);
                    scores[size_t(j)] = e;
                    sum += e;
                }
                const T inv = T(1) / sum;
                T* orow = out.data() + size_t(b * L + i) * d + size_t(h) * hd;
                for (int j = 0; j <= i; ++j) {
                    const T p = scores[size_t(j)] * inv;
                    (*probs)[base + size_t(i) * L + j] = p;
                    kern::axpy(p, v.ptr() + size_t(b * L + j) * d + size_t(h) * hd, orow, hd);
                }
            }
        }
    }
    auto qn = q.node();
    auto kn = k.node();
    auto vn = v.node();
    return Tensor<T>::make_op(
        q.shape(), std::move(out), {q, k, v},
        [qn, kn, vn, probs, batch, heads, L, hd, d, scl](auto& node) {
            qn->ensure_grad();
            kn->ensure_grad();
            vn->ensure_grad();
            std::vector<T> dp(static_cast<size_t>(L));
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const size_t base = (size_t(b) * heads + h) * L * L;
                    for (int i = 0; i < L; ++i) {
                        const T* dout = node.grad.data() + size_t(b * L + i) * d + size_t(h) * hd;
                        const T* prow = probs->data() + base + size_t(i) * L;
                        // dV and dP
                        T pdp = 0;
                        for (int j = 0; j <= i; ++j) {
                            const T* vj = vn->value.data() + size_t(b * L + j) * d + size_t(h) * hd;
                            dp[size_t(j)] = kern::dot(dout, vj, hd);
                            pdp += dp[size_t(j)] * prow[j];
                            kern::axpy(prow[j], dout,
                                       vn->grad.data() + size_t(b * L + j) * d + size_t(h) * hd,
                                       hd);
                        }
                        // dS -> dQ, dK
                        const T* qi = qn->value.data() + size_t(b * L + i) * d + size_t(h) * hd;
                        T* dqi = qn->grad.data() + size_t(b * L + i) * d + size_t(h) * hd;
                        for (int j = 0; j <= i; ++j) {
                            const T ds = prow[j] * (dp[size_t(j)] - pdp) * scl;
                            kern::axpy(ds, kn->value.data() + size_t(b * L + j) * d + size_t(h) * hd,
                                       dqi, hd);
                            kern::axpy(ds, qi,
                                       kn->grad.data() + size_t(b * L + j) * d + size_t(h) * hd,
                                       hd);
                        }
                    }
                }
            }
        });
}

}  // namespace hspec
