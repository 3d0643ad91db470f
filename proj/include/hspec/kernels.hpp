#pragma once

#include <cstddef>

// Dense float kernels shared by the autodiff ops and the inference path.
// Written with explicit partial accumulators so the compiler can vectorize
// without -ffast-math; summation order is fixed, results are deterministic.

namespace hspec::kern {

template <typename T>
inline T dot(const T* a, const T* b, int n) {
    constexpr int W = 128 / int(sizeof(T));  // two full-width FMA chains
    T s[W] = {};
    int i = 0;
    for (; i + W <= n; i += W)
        for (int j = 0; j < W; ++j) s[j] += a[i + j] * b[i + j];
    T tail = 0;
    for (; i < n; ++i) tail += a[i] * b[i];
    for (int w = W / 2; w > 0; w /= 2)  // pairwise fold, order fixed by W alone
        for (int j = 0; j < w; ++j) s[j] += s[j + w];
    return s[0] + tail;
}

// Four dots against a shared left row, interleaved so the accumulator chains
// overlap; each output's summation order is exactly dot()'s, so results are
// bitwise identical to four separate calls.
template <typename T>
inline void dot4(const T* a, const T* b0, const T* b1, const T* b2, const T* b3, int n, T* out) {
    constexpr int W = 128 / int(sizeof(T));
    T s0[W] = {}, s1[W] = {}, s2[W] = {}, s3[W] = {};
    int i = 0;
    for (; i + W <= n; i += W)
        for (int j = 0; j < W; ++j) {
            const T av = a[i + j];
            s0[j] += av * b0[i + j];
            s1[j] += av * b1[i + j];
            s2[j] += av * b2[i + j];
            s3[j] += av * b3[i + j];
        }
    T t0 = 0, t1 = 0, t2 = 0, t3 = 0;
    for (; i < n; ++i) {
        t0 += a[i] * b0[i];
        t1 += a[i] * b1[i];
        t2 += a[i] * b2[i];
        t3 += a[i] * b3[i];
    }
    for (int w = W / 2; w > 0; w /= 2)
        for (int j = 0; j < w; ++j) {
            s0[j] += s0[j + w];
            s1[j] += s1[j + w];
            s2[j] += s2[j + w];
            s3[j] += s3[j + w];
        }
    out[0] = s0[0] + t0;
    out[1] = s1[0] + t1;
    out[2] = s2[0] + t2;
    out[3] = s3[0] + t3;
}

// Two left rows against four shared right rows; same per-output order again.
template <typename T>
inline void dot2x4(const T* a0, const T* a1, const T* b0, const T* b1, const T* b2, const T* b3,
                   int n, T* o0, T* o1) {
    constexpr int W = 128 / int(sizeof(T));
    T p0[W] = {}, p1[W] = {}, p2[W] = {}, p3[W] = {};
    T q0[W] = {}, q1[W] = {}, q2[W] = {}, q3[W] = {};
    int i = 0;
    for (; i + W <= n; i += W)
        for (int j = 0; j < W; ++j) {
            const T u = a0[i + j], v = a1[i + j];
            const T x0 = b0[i + j], x1 = b1[i + j], x2 = b2[i + j], x3 = b3[i + j];
            p0[j] += u * x0;
            p1[j] += u * x1;
            p2[j] += u * x2;
            p3[j] += u * x3;
            q0[j] += v * x0;
            q1[j] += v * x1;
            q2[j] += v * x2;
            q3[j] += v * x3;
        }
    T tp0 = 0, tp1 = 0, tp2 = 0, tp3 = 0, tq0 = 0, tq1 = 0, tq2 = 0, tq3 = 0;
    for (; i < n; ++i) {
        tp0 += a0[i] * b0[i];
        tp1 += a0[i] * b1[i];
        tp2 += a0[i] * b2[i];
        tp3 += a0[i] * b3[i];
        tq0 += a1[i] * b0[i];
        tq1 += a1[i] * b1[i];
        tq2 += a1[i] * b2[i];
        tq3 += a1[i] * b3[i];
    }
    for (int w = W / 2; w > 0; w /= 2)
        for (int j = 0; j < w; ++j) {
            p0[j] += p0[j + w];
            p1[j] += p1[j + w];
            p2[j] += p2[j + w];
            p3[j] += p3[j + w];
            q0[j] += q0[j + w];
            q1[j] += q1[j + w];
            q2[j] += q2[j + w];
            q3[j] += q3[j + w];
        }
    o0[0] = p0[0] + tp0;
    o0[1] = p1[0] + tp1;
    o0[2] = p2[0] + tp2;
    o0[3] = p3[0] + tp3;
    o1[0] = q0[0] + tq0;
    o1[1] = q1[0] + tq1;
    o1[2] = q2[0] + tq2;
    o1[3] = q3[0] + tq3;
}

// y += alpha * x
template <typename T>
inline void axpy(T alpha, const T* x, T* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Four ordered axpy updates per element with y kept in registers; bitwise
// identical to four axpy calls, three round trips through y cheaper.
template <typename T>
inline void axpy4(T a0, const T* x0, T a1, const T* x1, T a2, const T* x2, T a3, const T* x3,
                  T* y, int n) {
    for (int i = 0; i < n; ++i) {
        T v = y[i];
        v += a0 * x0[i];
        v += a1 * x1[i];
        v += a2 * x2[i];
        v += a3 * x3[i];
        y[i] = v;
    }
}

// C[M x N] = A[M x K] * B[N x K]^T   (both row-major; add when accumulate)
// 2x4 register blocking; every output keeps dot()'s summation order, so row
// m's bits do not depend on M or on which blocked path computed them.
template <typename T>
inline void gemm_nt(const T* A, const T* B, T* C, int M, int N, int K, bool accumulate = false) {
    auto store = [accumulate](T* c, T v) {
        if (accumulate)
            *c += v;
        else
            *c = v;
    };
    int m = 0;
    for (; m + 2 <= M; m += 2) {
        const T* a0 = A + size_t(m) * K;
        const T* a1 = a0 + K;
        T* c0 = C + size_t(m) * N;
        T* c1 = c0 + N;
        int n = 0;
        for (; n + 4 <= N; n += 4) {
            T v0[4], v1[4];
            const T* b = B + size_t(n) * K;
            dot2x4(a0, a1, b, b + K, b + size_t(2) * K, b + size_t(3) * K, K, v0, v1);
            for (int j = 0; j < 4; ++j) {
                store(c0 + n + j, v0[j]);
                store(c1 + n + j, v1[j]);
            }
        }
        for (; n < N; ++n) {
            const T* brow = B + size_t(n) * K;
            store(c0 + n, dot(a0, brow, K));
            store(c1 + n, dot(a1, brow, K));
        }
    }
    if (m < M) {
        const T* arow = A + size_t(m) * K;
        T* crow = C + size_t(m) * N;
        int n = 0;
        for (; n + 4 <= N; n += 4) {
            T v[4];
            const T* b = B + size_t(n) * K;
            dot4(arow, b, b + K, b + size_t(2) * K, b + size_t(3) * K, K, v);
            for (int j = 0; j < 4; ++j) store(crow + n + j, v[j]);
        }
        for (; n < N; ++n) store(crow + n, dot(arow, B + size_t(n) * K, K));
    }
}

// C[M x N] = A[M x K] * B[K x N]   (row-major, axpy over rows of B)
template <typename T>
inline void gemm_nn(const T* A, const T* B, T* C, int M, int N, int K, bool accumulate = false) {
    for (int m = 0; m < M; ++m) {
        T* crow = C + size_t(m) * N;
        if (!accumulate)
            for (int n = 0; n < N; ++n) crow[n] = 0;
        const T* arow = A + size_t(m) * K;
        for (int k = 0; k < K; ++k) axpy(arow[k], B + size_t(k) * N, crow, N);
    }
}

// C[K x N] += A[M x K]^T * B[M x N]   (used for weight gradients)
template <typename T>
inline void gemm_tn_acc(const T* A, const T* B, T* C, int M, int N, int K) {
    for (int m = 0; m < M; ++m) {
        const T* arow = A + size_t(m) * K;
        const T* brow = B + size_t(m) * N;
        for (int k = 0; k < K; ++k) axpy(arow[k], brow, C + size_t(k) * N, N);
    }
}

}  // namespace hspec::kern
