// SPDX-License-Identifier: Apache-2.0
//
// Orthogonal Procrustes alignment between adjacent window frames.
#pragma once

#include "flowsig/common.hpp"
#include "flowsig/subspace.hpp"
#include "flowsig/windowing.hpp"

#include <Eigen/SVD>

#include <vector>

namespace flowsig {

struct Transport {
  Mat R;                  // k x k orthogonal
  double sigma_min = 1.0; // smallest singular value of U_next^T U_prev, in [0,1]
  bool reset = false;     // weak overlap: R replaced by the identity
  Vec sigmas;             // all singular values, clamped to [0,1]
};

inline constexpr double kDefaultTauSigma = 1e-3;
inline constexpr double kOrthonormalTolerance = 1e-5;

inline Transport identity_transport(int k) {
  return {Mat::Identity(k, k), 1.0, false, Vec::Ones(k)};
}

// R = P Q^T from U_next^T U_prev = P S Q^T, the minimizer of
// ||U_prev - U_next R||_F over O(k). Falls back to I_k when the smallest
// overlap is below tau_sigma.
inline Transport procrustes(const Mat& U_prev, const Mat& U_next, double tau_sigma = kDefaultTauSigma) {
  if (U_prev.rows() != U_next.rows() || U_prev.cols() != U_next.cols())
    throw StructuralError("procrustes frames have different shapes");
  if (orthonormality_defect(U_prev) > kOrthonormalTolerance ||
      orthonormality_defect(U_next) > kOrthonormalTolerance)
    throw PreconditionError("procrustes needs orthonormal frames");
  const auto k = U_prev.cols();
  const Mat C = U_next.transpose() * U_prev;
  Eigen::JacobiSVD<Mat> svd(C, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Transport out;
  out.sigmas = svd.singularValues().cwiseMax(0.0).cwiseMin(1.0);
  out.sigma_min = out.sigmas.minCoeff();
  if (out.sigma_min < tau_sigma) {
    out.R = Mat::Identity(k, k);
    out.reset = true;
  } else {
    out.R = svd.matrixU() * svd.matrixV().transpose();
  }
  return out;
}

// Transport for depth step b -> b+1 (b in [0, B-1]; boundary B shares the
// last window, so the final step never switches).
inline Transport step_transport(const WindowSchedule& w, const std::vector<WindowBasis>& bases, int b,
                                double tau_sigma = kDefaultTauSigma) {
  const int j0 = w.window_of(b), j1 = w.window_of(b + 1);
  const int k = static_cast<int>(bases.at(j0).U.cols());
  if (j0 == j1) return identity_transport(k);
  return procrustes(bases.at(j0).U, bases.at(j1).U, tau_sigma);
}

}  // namespace flowsig
