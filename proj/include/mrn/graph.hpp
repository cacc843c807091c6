#pragma once

#include <stdexcept>
#include <vector>

#include "mrn/linalg.hpp"

namespace mrn {

// L = diag(A 1) - A for a nonnegative weighted adjacency. Row i of A lists
// the in-edges of node i, so each row of L sums to zero.
inline Mat build_laplacian(const Mat& adjacency) {
  if (adjacency.rows() != adjacency.cols())
    throw std::invalid_argument("build_laplacian: adjacency must be square");
  const int n = adjacency.rows();
  Mat l(n, n);
  for (int i = 0; i < n; ++i) {
    double row_sum = 0.0;
    for (int j = 0; j < n; ++j) {
      row_sum += adjacency(i, j);
      l(i, j) = -adjacency(i, j);
    }
    l(i, i) += row_sum;
  }
  return l;
}

// True when every node is reachable from `root` along influence edges
// (a_ij > 0 lets information flow j -> i).
inline bool has_spanning_tree(const Mat& adjacency, int root) {
  const int n = adjacency.rows();
  std::vector<char> seen(n, 0);
  std::vector<int> stack{root};
  seen[root] = 1;
  int count = 0;
  while (!stack.empty()) {
    const int j = stack.back();
    stack.pop_back();
    ++count;
    for (int i = 0; i < n; ++i)
      if (!seen[i] && adjacency(i, j) > 0.0) {
        seen[i] = 1;
        stack.push_back(i);
      }
  }
  return count == n;
}

inline std::vector<int> in_neighbors(const Mat& adjacency, int i) {
  std::vector<int> out;
  for (int j = 0; j < adjacency.cols(); ++j)
    if (adjacency(i, j) > 0.0) out.push_back(j);
  return out;
}

inline std::vector<int> out_neighbors(const Mat& adjacency, int i) {
  std::vector<int> out;
  for (int j = 0; j < adjacency.rows(); ++j)
    if (adjacency(j, i) > 0.0) out.push_back(j);
  return out;
}

}  // namespace mrn
