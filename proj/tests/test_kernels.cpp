#include <random>
#include <vector>

#include "arcflow/kernels.hpp"
#include "doctest.h"

namespace k = arcflow::kernels;

namespace {

template <typename T>
std::vector<T> randn(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

template <typename T>
double max_rel(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double den = std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1.0});
    worst = std::max(worst, std::abs(double(a[i]) - double(b[i])) / den);
  }
  return worst;
}

struct Shape {
  std::size_t m, k, n;
};

// Odd sizes hit every tail path; the larger ones exercise the register tiles.
const Shape kShapes[] = {{1, 1, 1}, {3, 5, 7}, {4, 16, 32}, {7, 13, 37}, {9, 64, 70}, {64, 128, 96}, {33, 72, 130}};

template <typename T>
void compare_all(double tol) {
  unsigned seed = 1;
  for (const auto& s : kShapes) {
    CAPTURE(s.m);
    CAPTURE(s.k);
    CAPTURE(s.n);
    const auto a = randn<T>(s.m * s.k, seed++), b = randn<T>(s.k * s.n, seed++);
    const auto c0 = randn<T>(s.m * s.n, seed++);

    for (bool acc : {false, true}) {
      auto r = c0, o = c0;
      k::serial::matmul(a.data(), b.data(), r.data(), s.m, s.k, s.n, acc);
      k::omp::matmul(a.data(), b.data(), o.data(), s.m, s.k, s.n, acc);
      CHECK(max_rel(r, o) < tol);
    }

    // a^T b with a [m x k], b [m x n] -> [k x n]
    const auto bt = randn<T>(s.m * s.n, seed++);
    auto r = randn<T>(s.k * s.n, seed), o = r;
    ++seed;
    k::serial::matmul_at_b(a.data(), bt.data(), r.data(), s.m, s.k, s.n);
    k::omp::matmul_at_b(a.data(), bt.data(), o.data(), s.m, s.k, s.n);
    CHECK(max_rel(r, o) < tol);

    // a b^T with b [n x k]
    const auto bn = randn<T>(s.n * s.k, seed++);
    for (bool acc : {false, true}) {
      auto r2 = c0, o2 = c0;
      k::serial::matmul_a_bt(a.data(), bn.data(), r2.data(), s.m, s.k, s.n, acc);
      k::omp::matmul_a_bt(a.data(), bn.data(), o2.data(), s.m, s.k, s.n, acc);
      CHECK(max_rel(r2, o2) < tol);
    }

    const auto bias = randn<T>(s.n, seed++);
    auto rb = c0, ob = c0;
    k::serial::add_bias(rb.data(), bias.data(), s.m, s.n);
    k::omp::add_bias(ob.data(), bias.data(), s.m, s.n);
    CHECK(rb == ob);

    std::vector<T> rs(s.n, T{1}), os(s.n, T{1});
    k::serial::sum_rows(c0.data(), rs.data(), s.m, s.n);
    k::omp::sum_rows(c0.data(), os.data(), s.m, s.n);
    CHECK(max_rel(rs, os) < tol);
  }
}

}  // namespace

TEST_CASE("openmp kernels match the serial reference in float") { compare_all<float>(1e-5); }

TEST_CASE("openmp kernels match the serial reference in double") { compare_all<double>(1e-13); }

TEST_CASE("matmul against a hand-computed product") {
  const double a[] = {1, 2, 3, 4, 5, 6};        // 2 x 3
  const double b[] = {7, 8, 9, 10, 11, 12};     // 3 x 2
  double c[4];
  k::matmul(a, b, c, 2, 3, 2);
  CHECK(c[0] == 58);
  CHECK(c[1] == 64);
  CHECK(c[2] == 139);
  CHECK(c[3] == 154);
}

TEST_CASE("silu gradient matches central differences") {
  for (double x : {-4.0, -1.0, 0.0, 0.3, 2.5}) {
    const double h = 1e-6;
    const double fd = (k::silu(x + h) - k::silu(x - h)) / (2 * h);
    CHECK(k::silu_grad(x) == doctest::Approx(fd).epsilon(1e-8));
  }
}
