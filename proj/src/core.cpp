#include "relsim/core.hpp"

#include <atomic>
#include <thread>
#include <vector>

namespace relsim {

VectorXd vec_rm(const MatrixXd& m) {
  VectorXd v(m.size());
  Index k = 0;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) v[k++] = m(i, j);
  return v;
}

MatrixXd unvec_rm(const Eigen::Ref<const VectorXd>& v, int rows, int cols) {
  if (v.size() != Index(rows) * cols)
    throw InternalError("unvec_rm: size mismatch " + std::to_string(v.size()) + " vs " +
                        Shape(rows, cols).str());
  MatrixXd m(rows, cols);
  Index k = 0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = v[k++];
  return m;
}

namespace {
std::atomic<int> g_threads{1};
}

int thread_count() { return g_threads.load(); }

void set_thread_count(int n) { g_threads.store(n < 1 ? 1 : n); }

void parallel_for(Index n, const std::function<void(Index, Index)>& chunk) {
  if (n <= 0) return;
  int nt = thread_count();
  if (nt <= 1 || n < 2 * nt) {
    chunk(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(nt);
  Index per = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    Index b = t * per;
    Index e = std::min(n, b + per);
    if (b >= e) break;
    pool.emplace_back([&chunk, b, e] { chunk(b, e); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace relsim
