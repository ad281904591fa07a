// SPDX-License-Identifier: Apache-2.0
//
// Depth windows over blocks 0..B-1 with a forced final window ending at B-1,
// and the "first window containing b" assignment.
#pragma once

#include "flowsig/common.hpp"

#include <string>
#include <vector>

namespace flowsig {

// Window indices are 0-based here (window 0 is the first window).
struct WindowSchedule {
  int B = 0;
  int L = 0;
  int stride = 0;
  int J = 0;
  std::vector<int> starts;
  std::vector<int> ends;    // inclusive
  std::vector<int> assign;  // block -> window, size B

  // Window used at boundary b in [0, B]; boundary B shares the last window.
  int window_of(int b) const {
    if (b < 0 || b > B) throw RangeError("boundary " + std::to_string(b) + " outside schedule");
    return b == B ? J - 1 : assign[b];
  }
};

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

inline WindowSchedule build_schedule(int B, int L, int s) {
  if (B < 1 || L < 1 || s < 1)
    throw ParameterError("window schedule needs B >= 1, L >= 1, s >= 1");
  // A stride longer than the window would leave blocks uncovered.
  if (s > L) throw ParameterError("window stride must not exceed the window length");
  WindowSchedule w;
  w.B = B;
  w.L = L;
  w.stride = s;
  const int b_last = std::max(0, B - L);
  w.J = ceil_div(b_last, s) + 1;
  for (int j = 0; j < w.J; ++j) {
    const int start = std::min(j * s, b_last);
    w.starts.push_back(start);
    w.ends.push_back(std::min(start + L - 1, B - 1));
  }
  w.assign.resize(B);
  for (int b = 0; b < B; ++b)
    w.assign[b] = std::min(w.J, ceil_div(std::max(0, b - (L - 1)), s) + 1) - 1;
  return w;
}

// True when the step b -> b+1 crosses into a different window.
inline bool is_switch(const WindowSchedule& w, int b) {
  if (b < 0 || b + 1 > w.B) throw RangeError("step " + std::to_string(b) + " outside schedule");
  return w.window_of(b + 1) != w.window_of(b);
}

}  // namespace flowsig
