#pragma once

#include <cstdint>

namespace fedlap {

// Runtime switch between the serial reference kernels and the OpenMP ones.
// Both variants produce bit-identical results: parallel loops only split
// independent output elements and never reorder an accumulation.
void set_parallel(bool on);
bool parallel_enabled();
int worker_count();

namespace kernels {

// Serial reference implementations. Kept for testing and benchmarking; the
// dispatch functions below select between these and the OpenMP variants.
namespace serial {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void transpose(const double* a, double* b, int64_t rows, int64_t cols);
void conv2d_fwd(const double* x, const double* w, double* y,
                int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void conv2d_dx(const double* gy, const double* w, double* dx,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void conv2d_dw(const double* x, const double* gy, double* dw,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void avgpool2(const double* x, double* y, int64_t planes, int64_t h, int64_t wd);
void unpool2(const double* g, double* dx, int64_t planes, int64_t h, int64_t wd);
void ewise_add(const double* a, const double* b, double* c, int64_t n);
void ewise_sub(const double* a, const double* b, double* c, int64_t n);
void ewise_mul(const double* a, const double* b, double* c, int64_t n);
void ewise_scale(const double* a, double s, double* c, int64_t n);
void relu(const double* a, double* c, int64_t n);
void relu_mask(const double* a, double* c, int64_t n);
}  // namespace serial

namespace openmp {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void transpose(const double* a, double* b, int64_t rows, int64_t cols);
void conv2d_fwd(const double* x, const double* w, double* y,
                int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void conv2d_dx(const double* gy, const double* w, double* dx,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void conv2d_dw(const double* x, const double* gy, double* dw,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void avgpool2(const double* x, double* y, int64_t planes, int64_t h, int64_t wd);
void unpool2(const double* g, double* dx, int64_t planes, int64_t h, int64_t wd);
void ewise_add(const double* a, const double* b, double* c, int64_t n);
void ewise_sub(const double* a, const double* b, double* c, int64_t n);
void ewise_mul(const double* a, const double* b, double* c, int64_t n);
void ewise_scale(const double* a, double s, double* c, int64_t n);
void relu(const double* a, double* c, int64_t n);
void relu_mask(const double* a, double* c, int64_t n);
}  // namespace openmp

// Dispatchers used by the autodiff layer.
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n);
void transpose(const double* a, double* b, int64_t rows, int64_t cols);
void conv2d_fwd(const double* x, const double* w, double* y,
                int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void conv2d_dx(const double* gy, const double* w, double* dx,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void conv2d_dw(const double* x, const double* gy, double* dw,
               int64_t batch, int64_t cin, int64_t h, int64_t wd, int64_t cout);
void avgpool2(const double* x, double* y, int64_t planes, int64_t h, int64_t wd);
void unpool2(const double* g, double* dx, int64_t planes, int64_t h, int64_t wd);
void ewise_add(const double* a, const double* b, double* c, int64_t n);
void ewise_sub(const double* a, const double* b, double* c, int64_t n);
void ewise_mul(const double* a, const double* b, double* c, int64_t n);
void ewise_scale(const double* a, double s, double* c, int64_t n);
void relu(const double* a, double* c, int64_t n);
void relu_mask(const double* a, double* c, int64_t n);

}  // namespace kernels
}  // namespace fedlap
