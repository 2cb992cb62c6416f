#include "fedlap/kernels.hpp"

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fedlap {

namespace {
std::atomic<bool> g_parallel{
#ifdef _OPENMP
    true
#else
    false
#endif
};
}  // namespace

void set_parallel(bool on) { g_parallel.store(on); }
bool parallel_enabled() { return g_parallel.load(); }

int worker_count() {
#ifdef _OPENMP
    return parallel_enabled() ? omp_get_max_threads() : 1;
#else
    return 1;
#endif
}

namespace kernels {

// ---------------------------------------------------------------------------
// Serial reference kernels.
//
// The OpenMP variants below must keep the exact per-element accumulation
// order of these loops; tests assert bit-identical outputs.
// ---------------------------------------------------------------------------
namespace serial {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (int64_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void transpose(const double* a, double* b, int64_t rows, int64_t cols) {
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) b[j * rows + i] = a[i * cols + j];
}

// 3x3 kernels, stride 1, pad 1: spatial extent is preserved.
void conv2d_fwd(const double* x, const double* w, double* y,
                int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    const int64_t plane = h * wd;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t o = 0; o < cout; ++o) {
            double* yp = y + (b * cout + o) * plane;
            for (int64_t i = 0; i < h; ++i) {
                for (int64_t j = 0; j < wd; ++j) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < cin; ++c) {
                        const double* xp = x + (b * cin + c) * plane;
                        const double* wp = w + (o * cin + c) * 9;
                        for (int64_t di = 0; di < 3; ++di) {
                            const int64_t ii = i + di - 1;
                            if (ii < 0 || ii >= h) continue;
                            for (int64_t dj = 0; dj < 3; ++dj) {
                                const int64_t jj = j + dj - 1;
                                if (jj < 0 || jj >= wd) continue;
                                acc += xp[ii * wd + jj] * wp[di * 3 + dj];
                            }
                        }
                    }
                    yp[i * wd + j] = acc;
                }
            }
        }
    }
}

void conv2d_dx(const double* gy, const double* w, double* dx,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    const int64_t plane = h * wd;
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < cin; ++c) {
            double* dp = dx + (b * cin + c) * plane;
            for (int64_t p = 0; p < h; ++p) {
                for (int64_t q = 0; q < wd; ++q) {
                    double acc = 0.0;
                    for (int64_t o = 0; o < cout; ++o) {
                        const double* gp = gy + (b * cout + o) * plane;
                        const double* wp = w + (o * cin + c) * 9;
                        for (int64_t di = 0; di < 3; ++di) {
                            const int64_t ii = p - di + 1;
                            if (ii < 0 || ii >= h) continue;
                            for (int64_t dj = 0; dj < 3; ++dj) {
                                const int64_t jj = q - dj + 1;
                                if (jj < 0 || jj >= wd) continue;
                                acc += gp[ii * wd + jj] * wp[di * 3 + dj];
                            }
                        }
                    }
                    dp[p * wd + q] = acc;
                }
            }
        }
    }
}

void conv2d_dw(const double* x, const double* gy, double* dw,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    const int64_t plane = h * wd;
    for (int64_t o = 0; o < cout; ++o) {
        for (int64_t c = 0; c < cin; ++c) {
            double* wp = dw + (o * cin + c) * 9;
            for (int64_t di = 0; di < 3; ++di) {
                for (int64_t dj = 0; dj < 3; ++dj) {
                    double acc = 0.0;
                    for (int64_t b = 0; b < batch; ++b) {
                        const double* gp = gy + (b * cout + o) * plane;
                        const double* xp = x + (b * cin + c) * plane;
                        for (int64_t i = 0; i < h; ++i) {
                            const int64_t ii = i + di - 1;
                            if (ii < 0 || ii >= h) continue;
                            for (int64_t j = 0; j < wd; ++j) {
                                const int64_t jj = j + dj - 1;
                                if (jj < 0 || jj >= wd) continue;
                                acc += gp[i * wd + j] * xp[ii * wd + jj];
                            }
                        }
                    }
                    wp[di * 3 + dj] = acc;
                }
            }
        }
    }
}

// 2x2 mean pooling, stride 2; a trailing odd row/column is dropped.
void avgpool2(const double* x, double* y, int64_t planes, int64_t h, int64_t wd) {
    const int64_t oh = h / 2, ow = wd / 2;
    for (int64_t p = 0; p < planes; ++p) {
        const double* xp = x + p * h * wd;
        double* yp = y + p * oh * ow;
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j)
                yp[i * ow + j] = 0.25 * (xp[2 * i * wd + 2 * j] + xp[2 * i * wd + 2 * j + 1] +
                                         xp[(2 * i + 1) * wd + 2 * j] +
                                         xp[(2 * i + 1) * wd + 2 * j + 1]);
    }
}

void unpool2(const double* g, double* dx, int64_t planes, int64_t h, int64_t wd) {
    const int64_t oh = h / 2, ow = wd / 2;
    for (int64_t p = 0; p < planes; ++p) {
        const double* gp = g + p * oh * ow;
        double* dp = dx + p * h * wd;
        for (int64_t i = 0; i < h * wd; ++i) dp[i] = 0.0;
        for (int64_t i = 0; i < oh; ++i) {
            for (int64_t j = 0; j < ow; ++j) {
                const double v = 0.25 * gp[i * ow + j];
                dp[2 * i * wd + 2 * j] = v;
                dp[2 * i * wd + 2 * j + 1] = v;
                dp[(2 * i + 1) * wd + 2 * j] = v;
                dp[(2 * i + 1) * wd + 2 * j + 1] = v;
            }
        }
    }
}

void ewise_add(const double* a, const double* b, double* c, int64_t n) {
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}
void ewise_sub(const double* a, const double* b, double* c, int64_t n) {
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] - b[i];
}
void ewise_mul(const double* a, const double* b, double* c, int64_t n) {
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] * b[i];
}
void ewise_scale(const double* a, double s, double* c, int64_t n) {
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] * s;
}
void relu(const double* a, double* c, int64_t n) {
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] > 0.0 ? a[i] : 0.0;
}
// Derivative convention: exactly-zero pre-activations get slope 0.
void relu_mask(const double* a, double* c, int64_t n) {
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] > 0.0 ? 1.0 : 0.0;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels. Parallelism splits independent output elements only, so
// every output element sees the same accumulation order as the reference.
// ---------------------------------------------------------------------------
namespace openmp {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for schedule(static) if (m * n * k > 16384)
    for (int64_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) ci[j] = 0.0;
        for (int64_t p = 0; p < k; ++p) {
            const double aip = a[i * k + p];
            const double* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

void transpose(const double* a, double* b, int64_t rows, int64_t cols) {
#pragma omp parallel for schedule(static) if (rows * cols > 65536)
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) b[j * rows + i] = a[i * cols + j];
}

void conv2d_fwd(const double* x, const double* w, double* y,
                int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    const int64_t plane = h * wd;
#pragma omp parallel for collapse(2) schedule(static) if (batch * cout * plane * cin > 8192)
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t o = 0; o < cout; ++o) {
            double* yp = y + (b * cout + o) * plane;
            for (int64_t i = 0; i < h; ++i) {
                for (int64_t j = 0; j < wd; ++j) {
                    double acc = 0.0;
                    for (int64_t c = 0; c < cin; ++c) {
                        const double* xp = x + (b * cin + c) * plane;
                        const double* wp = w + (o * cin + c) * 9;
                        for (int64_t di = 0; di < 3; ++di) {
                            const int64_t ii = i + di - 1;
                            if (ii < 0 || ii >= h) continue;
                            for (int64_t dj = 0; dj < 3; ++dj) {
                                const int64_t jj = j + dj - 1;
                                if (jj < 0 || jj >= wd) continue;
                                acc += xp[ii * wd + jj] * wp[di * 3 + dj];
                            }
                        }
                    }
                    yp[i * wd + j] = acc;
                }
            }
        }
    }
}

void conv2d_dx(const double* gy, const double* w, double* dx,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    const int64_t plane = h * wd;
#pragma omp parallel for collapse(2) schedule(static) if (batch * cin * plane * cout > 8192)
    for (int64_t b = 0; b < batch; ++b) {
        for (int64_t c = 0; c < cin; ++c) {
            double* dp = dx + (b * cin + c) * plane;
            for (int64_t p = 0; p < h; ++p) {
                for (int64_t q = 0; q < wd; ++q) {
                    double acc = 0.0;
                    for (int64_t o = 0; o < cout; ++o) {
                        const double* gp = gy + (b * cout + o) * plane;
                        const double* wp = w + (o * cin + c) * 9;
                        for (int64_t di = 0; di < 3; ++di) {
                            const int64_t ii = p - di + 1;
                            if (ii < 0 || ii >= h) continue;
                            for (int64_t dj = 0; dj < 3; ++dj) {
                                const int64_t jj = q - dj + 1;
                                if (jj < 0 || jj >= wd) continue;
                                acc += gp[ii * wd + jj] * wp[di * 3 + dj];
                            }
                        }
                    }
                    dp[p * wd + q] = acc;
                }
            }
        }
    }
}

void conv2d_dw(const double* x, const double* gy, double* dw,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    const int64_t plane = h * wd;
#pragma omp parallel for collapse(2) schedule(static) if (batch * cout * cin * plane > 8192)
    for (int64_t o = 0; o < cout; ++o) {
        for (int64_t c = 0; c < cin; ++c) {
            double* wp = dw + (o * cin + c) * 9;
            for (int64_t di = 0; di < 3; ++di) {
                for (int64_t dj = 0; dj < 3; ++dj) {
                    double acc = 0.0;
                    for (int64_t b = 0; b < batch; ++b) {
                        const double* gp = gy + (b * cout + o) * plane;
                        const double* xp = x + (b * cin + c) * plane;
                        for (int64_t i = 0; i < h; ++i) {
                            const int64_t ii = i + di - 1;
                            if (ii < 0 || ii >= h) continue;
                            for (int64_t j = 0; j < wd; ++j) {
                                const int64_t jj = j + dj - 1;
                                if (jj < 0 || jj >= wd) continue;
                                acc += gp[i * wd + j] * xp[ii * wd + jj];
                            }
                        }
                    }
                    wp[di * 3 + dj] = acc;
                }
            }
        }
    }
}

void avgpool2(const double* x, double* y, int64_t planes, int64_t h, int64_t wd) {
    const int64_t oh = h / 2, ow = wd / 2;
#pragma omp parallel for schedule(static) if (planes * oh * ow > 16384)
    for (int64_t p = 0; p < planes; ++p) {
        const double* xp = x + p * h * wd;
        double* yp = y + p * oh * ow;
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j)
                yp[i * ow + j] = 0.25 * (xp[2 * i * wd + 2 * j] + xp[2 * i * wd + 2 * j + 1] +
                                         xp[(2 * i + 1) * wd + 2 * j] +
                                         xp[(2 * i + 1) * wd + 2 * j + 1]);
    }
}

void unpool2(const double* g, double* dx, int64_t planes, int64_t h, int64_t wd) {
    const int64_t oh = h / 2, ow = wd / 2;
#pragma omp parallel for schedule(static) if (planes * h * wd > 16384)
    for (int64_t p = 0; p < planes; ++p) {
        const double* gp = g + p * oh * ow;
        double* dp = dx + p * h * wd;
        for (int64_t i = 0; i < h * wd; ++i) dp[i] = 0.0;
        for (int64_t i = 0; i < oh; ++i) {
            for (int64_t j = 0; j < ow; ++j) {
                const double v = 0.25 * gp[i * ow + j];
                dp[2 * i * wd + 2 * j] = v;
                dp[2 * i * wd + 2 * j + 1] = v;
                dp[(2 * i + 1) * wd + 2 * j] = v;
                dp[(2 * i + 1) * wd + 2 * j + 1] = v;
            }
        }
    }
}

void ewise_add(const double* a, const double* b, double* c, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] + b[i];
}
void ewise_sub(const double* a, const double* b, double* c, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] - b[i];
}
void ewise_mul(const double* a, const double* b, double* c, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] * b[i];
}
void ewise_scale(const double* a, double s, double* c, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] * s;
}
void relu(const double* a, double* c, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] > 0.0 ? a[i] : 0.0;
}
void relu_mask(const double* a, double* c, int64_t n) {
#pragma omp parallel for schedule(static) if (n > 65536)
    for (int64_t i = 0; i < n; ++i) c[i] = a[i] > 0.0 ? 1.0 : 0.0;
}

}  // namespace openmp

#ifdef _OPENMP
#define FEDLAP_DISPATCH(fn, ...) \
    do { \
        if (parallel_enabled()) \
            openmp::fn(__VA_ARGS__); \
        else \
            serial::fn(__VA_ARGS__); \
    } while (0)
#else
#define FEDLAP_DISPATCH(fn, ...) serial::fn(__VA_ARGS__)
#endif

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n) {
    FEDLAP_DISPATCH(matmul, a, b, c, m, k, n);
}
void transpose(const double* a, double* b, int64_t rows, int64_t cols) {
    FEDLAP_DISPATCH(transpose, a, b, rows, cols);
}
void conv2d_fwd(const double* x, const double* w, double* y,
                int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    FEDLAP_DISPATCH(conv2d_fwd, x, w, y, batch, cin, h, wd, cout);
}
void conv2d_dx(const double* gy, const double* w, double* dx,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    FEDLAP_DISPATCH(conv2d_dx, gy, w, dx, batch, cin, h, wd, cout);
}
void conv2d_dw(const double* x, const double* gy, double* dw,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout) {
    FEDLAP_DISPATCH(conv2d_dw, x, gy, dw, batch, cin, h, wd, cout);
}
void avgpool2(const double* x, double* y, int64_t planes, int64_t h, int64_t wd) {
    FEDLAP_DISPATCH(avgpool2, x, y, planes, h, wd);
}
void unpool2(const double* g, double* dx, int64_t planes, int64_t h, int64_t wd) {
    FEDLAP_DISPATCH(unpool2, g, dx, planes, h, wd);
}
void ewise_add(const double* a, const double* b, double* c, int64_t n) {
    FEDLAP_DISPATCH(ewise_add, a, b, c, n);
}
void ewise_sub(const double* a, const double* b, double* c, int64_t n) {
    FEDLAP_DISPATCH(ewise_sub, a, b, c, n);
}
void ewise_mul(const double* a, const double* b, double* c, int64_t n) {
    FEDLAP_DISPATCH(ewise_mul, a, b, c, n);
}
void ewise_scale(const double* a, double s, double* c, int64_t n) {
    FEDLAP_DISPATCH(ewise_scale, a, s, c, n);
}
void relu(const double* a, double* c, int64_t n) { FEDLAP_DISPATCH(relu, a, c, n); }
void relu_mask(const double* a, double* c, int64_t n) { FEDLAP_DISPATCH(relu_mask, a, c, n); }

#undef FEDLAP_DISPATCH

}  // namespace kernels
}  // namespace fedlap
