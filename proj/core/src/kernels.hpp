#pragma once

// Row-major GEMM kernels shared by the tensor ops and the model benches.

#include <Eigen/Core>
#include <cstddef>

namespace stpark::kernels {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[m,n] (+)= A[m,k] B[k,n]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
                    bool accumulate) {
  ConstMap A(a, m, k);
  ConstMap B(b, k, n);
  MutMap C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

// C[m,n] += A[m,k] B[n,k]^T
inline void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  ConstMap A(a, m, k);
  ConstMap B(b, n, k);
  MutMap C(c, m, n);
  C.noalias() += A * B.transpose();
}

// C[m,n] += A[k,m]^T B[k,n]
inline void gemm_tn_acc(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  ConstMap A(a, k, m);
  ConstMap B(b, k, n);
  MutMap C(c, m, n);
  C.noalias() += A.transpose() * B;
}

}  // namespace stpark::kernels
