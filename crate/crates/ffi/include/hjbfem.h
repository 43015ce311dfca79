#ifndef HJBFEM_H
#define HJBFEM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum HjbStatus {
  HJB_STATUS_OK = 0,
  HJB_STATUS_NULL_POINTER = 1,
  HJB_STATUS_INVALID_ARGUMENT = 2,
  HJB_STATUS_UNKNOWN_FAMILY = 3,
  HJB_STATUS_CORDES_FAILURE = 4,
  HJB_STATUS_NO_CONVERGENCE = 5,
  HJB_STATUS_LINEAR_SOLVE = 6,
  HJB_STATUS_NO_EXACT_HAMILTONIAN = 7,
  HJB_STATUS_INTERNAL = 8,
} HjbStatus;

// Coefficient family together with its Cordes certificate.
typedef struct HjbFamily HjbFamily;

// Outcome of one cell-problem solve.
typedef struct HjbCellResult {
  // `H_{sigma,h}(R)`.
  double value;
  // A posteriori estimator.
  double eta;
  size_t iterations;
  // Final nonlinear residual.
  double residual;
} HjbCellResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates a handle for the built-in family `name` ("fo-benchmark",
// "fo-benchmark-a1zero", "manufactured", "laplace") and certifies the
// Cordes condition on a `samples` x `samples` grid.
//
// # Safety
// `name` must be a NUL-terminated string and `out` a writable pointer.
enum HjbStatus hjb_family_new(const char *name, size_t samples, struct HjbFamily **out);

// Releases a handle; null is ignored.
//
// # Safety
// `family` must come from [`hjb_family_new`] and not be used afterwards.
void hjb_family_free(struct HjbFamily *family);

// Certified Cordes parameters `lambda` and `delta`.
//
// # Safety
// All pointers must be valid.
enum HjbStatus hjb_family_certificate(const struct HjbFamily *family,
                                      double *lambda,
                                      double *delta);

// Closed-form effective Hamiltonian at the row-major symmetric matrix `r`
// (benchmark families only).
//
// # Safety
// `family` must be a live handle, `r` four readable doubles, `out` writable.
enum HjbStatus hjb_exact_h(const struct HjbFamily *family, const double *r, double *out);

// Solves the cell problem at `(s, p) = 0` and Hessian `r` on an `n x n`
// periodic mesh with regularisation `sigma`.
//
// # Safety
// `family` must be a live handle, `r` four readable doubles, `out` writable.
enum HjbStatus hjb_cell_solve(const struct HjbFamily *family,
                              const double *r,
                              double sigma,
                              size_t n,
                              double tol,
                              size_t max_iter,
                              struct HjbCellResult *out);

// Copies the calling thread's last error message (NUL-terminated,
// truncated to `len`) into `buf` and returns the full message length
// without the terminator. `buf` may be null to query the length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t hjb_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *hjb_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HJBFEM_H */
