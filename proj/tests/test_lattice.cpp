#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <span>
#include <vector>

#include "cpa/lattice.hpp"
#include "cpa/rng.hpp"

using namespace cpa;

namespace {

// Brute-force nearest point: scan every point, strict improvement keeps the
// smallest index on ties. Independent of the closed-form path under test.
QuantizeResult nearest_oracle(const LatticeSpec& lat, std::span<const double> x) {
  QuantizeResult best;
  double best_d = std::numeric_limits<double>::infinity();
  for (int l = 0; l < lat.count(); ++l) {
    auto q = lat.point(l);
    double d = 0.0;
    for (int a = 0; a < lat.dim; ++a) d += (x[a] - q[a]) * (x[a] - q[a]);
    if (d < best_d) {
      best_d = d;
      best.index = l;
      best.point.assign(q.begin(), q.end());
    }
  }
  return best;
}

}  // namespace

TEST_CASE("scalar lattice construction") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);
  CHECK(lat.spacing == doctest::Approx(0.5));
  REQUIRE(lat.count() == 4);
  CHECK(lat.points[0] == doctest::Approx(-0.75));
  CHECK(lat.points[1] == doctest::Approx(-0.25));
  CHECK(lat.points[2] == doctest::Approx(0.25));
  CHECK(lat.points[3] == doctest::Approx(0.75));

  // All points inside the support, symmetric about the origin.
  for (int l = 0; l < lat.count(); ++l) CHECK(std::fabs(lat.points[l]) <= lat.gamma);
  for (int l = 0; l < lat.count(); ++l)
    CHECK(lat.points[l] == doctest::Approx(-lat.points[lat.count() - 1 - l]));

  CHECK(make_scalar_lattice(1.0, 1).count() == 2);
  CHECK(make_scalar_lattice(2.0, 3).spacing == doctest::Approx(0.5));

  // R = log2(2 gamma / delta) holds exactly.
  CHECK(std::log2(2.0 * lat.gamma / lat.spacing) == doctest::Approx(2.0));

  CHECK_THROWS(make_scalar_lattice(-1.0, 2));
  CHECK_THROWS(make_scalar_lattice(1.0, 0));
}

TEST_CASE("z2 lattice construction") {
  LatticeSpec lat = make_z2_lattice(1.0, 2);
  REQUIRE(lat.count() == 16);  // 2^{L R} with L = 2, R = 2
  for (int l = 0; l < lat.count(); ++l) {
    auto q = lat.point(l);
    CHECK(q[0] * q[0] + q[1] * q[1] <= lat.gamma * lat.gamma);
  }
  // Lexicographic ordering of the point list.
  for (int l = 1; l < lat.count(); ++l) {
    auto a = lat.point(l - 1);
    auto b = lat.point(l);
    bool less = a[0] < b[0] || (a[0] == b[0] && a[1] < b[1]);
    CHECK(less);
  }
}

TEST_CASE("quantize_nearest scalar cases") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);

  double x = 0.3;
  auto q = quantize_nearest(lat, {&x, 1});
  CHECK(q.point[0] == doctest::Approx(0.25));

  // An exact lattice point maps to itself.
  for (int l = 0; l < lat.count(); ++l) {
    double p = lat.points[l];
    auto r = quantize_nearest(lat, {&p, 1});
    CHECK(r.index == l);
    CHECK(r.point[0] == p);
  }

  // Overloaded input saturates at the extreme point gamma - delta/2.
  x = 1.7;
  q = quantize_nearest(lat, {&x, 1});
  CHECK(q.point[0] == doctest::Approx(1.0 - 0.25));
  x = -3.0;
  q = quantize_nearest(lat, {&x, 1});
  CHECK(q.point[0] == doctest::Approx(-0.75));
}

TEST_CASE("quantize_nearest matches the brute-force oracle") {
  StreamRng rng(1001);
  for (int rate = 1; rate <= 4; ++rate) {
    LatticeSpec lat = make_scalar_lattice(1.3, rate);
    for (int i = 0; i < 2000; ++i) {
      double x = rng.uniform(-2.0, 2.0);
      auto a = quantize_nearest(lat, {&x, 1});
      auto b = nearest_oracle(lat, {&x, 1});
      CHECK(a.index == b.index);
    }
  }
  LatticeSpec z2 = make_z2_lattice(1.0, 2);
  for (int i = 0; i < 2000; ++i) {
    double x[2] = {rng.uniform(-1.5, 1.5), rng.uniform(-1.5, 1.5)};
    auto a = quantize_nearest(z2, {x, 2});
    auto b = nearest_oracle(z2, {x, 2});
    CHECK(a.index == b.index);
  }
}

TEST_CASE("boundary ties take the smaller index") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);
  double x = 0.5;  // midpoint between 0.25 and 0.75
  auto q = quantize_nearest(lat, {&x, 1});
  CHECK(q.point[0] == doctest::Approx(0.25));
  x = 0.0;  // midpoint between -0.25 and 0.25
  q = quantize_nearest(lat, {&x, 1});
  CHECK(q.point[0] == doctest::Approx(-0.25));
}

TEST_CASE("dither statistics") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);  // delta = 0.5
  StreamRng rng = derive_stream(7, 0, 0, 0, StreamPurpose::dither);
  const int n = 1000000;
  double mean = 0, m2 = 0;
  double v[1];
  for (int i = 0; i < n; ++i) {
    dither_sample(lat, rng, v);
    CHECK(v[0] > -0.25);
    CHECK(v[0] <= 0.25);
    mean += v[0];
    m2 += v[0] * v[0];
  }
  mean /= n;
  m2 /= n;
  double sigma = lat.spacing / std::sqrt(12.0);
  CHECK(std::fabs(mean) < 4.0 * sigma / std::sqrt(double(n)));
  double var = m2 - mean * mean;
  CHECK(var == doctest::Approx(lat.spacing * lat.spacing / 12.0).epsilon(0.01));
}

TEST_CASE("dithered quantization is unbiased away from the support edge") {
  LatticeSpec lat = make_scalar_lattice(1.0, 3);
  StreamRng rng = derive_stream(8, 0, 0, 0, StreamPurpose::dither);
  const int n = 200000;
  for (double x : {-0.6, -0.2, 0.0, 0.37, 0.71}) {
    double sum = 0;
    int overloads = 0;
    for (int i = 0; i < n; ++i) {
      auto r = dithered_quantize(lat, {&x, 1}, rng);
      sum += r.point[0] - x;
      overloads += r.overloaded ? 1 : 0;
    }
    CHECK(overloads == 0);
    // Error variance of one draw is at most delta^2 / 4.
    double tol = 4.0 * (lat.spacing / 2.0) / std::sqrt(double(n));
    CHECK(std::fabs(sum / n) < tol);
  }
}

TEST_CASE("dither crossing probability at a cell midpoint") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);
  StreamRng rng = derive_stream(9, 0, 0, 0, StreamPurpose::dither);
  const int n = 100000;
  double x = 0.5;  // equidistant from 0.25 and 0.75
  int high = 0;
  for (int i = 0; i < n; ++i) {
    auto r = dithered_quantize(lat, {&x, 1}, rng);
    if (r.point[0] > 0.5) ++high;
  }
  CHECK(double(high) / n == doctest::Approx(0.5).epsilon(0.02));
}

TEST_CASE("overload is counted and clamped") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);
  StreamRng rng = derive_stream(10, 0, 0, 0, StreamPurpose::dither);
  double x = 5.0;
  auto r = dithered_quantize(lat, {&x, 1}, rng);
  CHECK(r.overloaded);
  CHECK(r.point[0] == doctest::Approx(0.75));
}

TEST_CASE("second moment closed forms and Monte Carlo") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);  // delta = 0.5
  CHECK(lat.second_moment_normalized() == doctest::Approx(1.0 / 12.0));
  CHECK(lat.cell_distortion_variance() == doctest::Approx(0.25 / 12.0));

  StreamRng rng(55);
  auto est = lattice_second_moment_mc(lat, 1000000, rng);
  CHECK(est.value == doctest::Approx(1.0 / 12.0).epsilon(0.01));
  CHECK(est.std_error < 0.001);

  LatticeSpec z2 = make_z2_lattice(1.0, 2);
  auto est2 = lattice_second_moment_mc(z2, 1000000, rng);
  CHECK(est2.value == doctest::Approx(1.0 / 12.0).epsilon(0.01));

  // Unnormalized cell variance scales as zeta^2.
  LatticeSpec scaled = scale_lattice(lat, 3.0);
  CHECK(scaled.cell_distortion_variance() ==
        doctest::Approx(9.0 * lat.cell_distortion_variance()));
}

TEST_CASE("scale_lattice") {
  LatticeSpec lat = make_scalar_lattice(1.0, 2);

  LatticeSpec same = scale_lattice(lat, 1.0);
  CHECK(same.gamma == lat.gamma);
  CHECK(same.spacing == lat.spacing);
  for (int l = 0; l < lat.count(); ++l) CHECK(same.points[l] == lat.points[l]);

  LatticeSpec half = scale_lattice(lat, 0.5);
  CHECK(half.gamma == doctest::Approx(0.5));
  CHECK(half.spacing == doctest::Approx(lat.spacing / 2.0));
  CHECK(half.bits_per_axis == lat.bits_per_axis);

  // Index equivariance under joint scaling.
  StreamRng rng(77);
  for (int i = 0; i < 1000; ++i) {
    double x = rng.uniform(-2.0, 2.0);
    double sx = 0.5 * x;
    CHECK(quantize_nearest(half, {&sx, 1}).index == quantize_nearest(lat, {&x, 1}).index);
  }
}

TEST_CASE("split_nested structure") {
  LatticeSpec fine = make_scalar_lattice(1.0, 4);
  NestedPair pair = split_nested(fine, 1, 3);
  CHECK(pair.coarse.count() == 2);
  CHECK(pair.nested.count() == 8);
  CHECK(pair.coarse.spacing == doctest::Approx(8.0 * fine.spacing));

  // Coarse spacing is an integer multiple of the fine spacing.
  double ratio = pair.coarse.spacing / fine.spacing;
  CHECK(ratio == doctest::Approx(std::round(ratio)));

  // Nested points live inside the coarse spacing cell.
  for (int l = 0; l < pair.nested.count(); ++l)
    CHECK(std::fabs(pair.nested.points[l]) <= pair.coarse.spacing / 2.0);

  CHECK_THROWS(split_nested(fine, 4, 0));
  CHECK_THROWS(split_nested(fine, 2, 3));
}

TEST_CASE("every fine point reconstructs exactly from its decomposition") {
  for (double gamma : {1.0, 0.5, 2.0}) {
    LatticeSpec fine = make_scalar_lattice(gamma, 4);
    NestedPair pair = split_nested(fine, 1, 3);
    StreamRng rng(3);
    for (int m = 0; m < fine.count(); ++m) {
      double x = fine.points[m];
      auto r = nested_quantize(pair, {&x, 1}, rng, /*zero_dither=*/true);
      CHECK(r.coarse_index * pair.nested.count() + r.nested_index == m);
      // Bit-exact sum of stored coordinates for dyadic supports.
      double rec = pair.coarse.points[r.coarse_index] + pair.nested.points[r.nested_index];
      CHECK(rec == fine.points[m]);
    }
  }
}

TEST_CASE("nested quantization equals the fine quantizer for shared dither") {
  LatticeSpec fine = make_scalar_lattice(1.0, 4);
  NestedPair pair = split_nested(fine, 1, 3);
  StreamRng rng(404);
  for (int i = 0; i < 20000; ++i) {
    double x = rng.uniform(-1.2, 1.2);
    StreamRng s1 = derive_stream(11, 0, 0, static_cast<std::uint64_t>(i), StreamPurpose::dither);
    StreamRng s2 = derive_stream(11, 0, 0, static_cast<std::uint64_t>(i), StreamPurpose::dither);
    auto direct = dithered_quantize(fine, {&x, 1}, s1);
    auto nested = nested_quantize(pair, {&x, 1}, s2);
    CHECK(direct.index == nested.coarse_index * pair.nested.count() + nested.nested_index);
    CHECK(direct.overloaded == nested.overloaded);
  }
}

TEST_CASE("nested hand example") {
  // Fine rate 3 with unit support: fine spacing 0.25, coarse spacing 1.
  LatticeSpec fine = make_scalar_lattice(1.0, 3);
  NestedPair pair = split_nested(fine, 1, 2);
  double x = 0.6;
  StreamRng rng(1);
  auto r = nested_quantize(pair, {&x, 1}, rng, /*zero_dither=*/true);
  CHECK(pair.coarse.points[r.coarse_index] == doctest::Approx(0.5));
  double rec = pair.coarse.points[r.coarse_index] + pair.nested.points[r.nested_index];
  CHECK(rec == doctest::Approx(quantize_nearest(fine, {&x, 1}).point[0]));
}

TEST_CASE("coarse point input decomposes consistently with the fine path") {
  LatticeSpec fine = make_scalar_lattice(1.0, 4);
  NestedPair pair = split_nested(fine, 1, 3);
  for (int j = 0; j < pair.coarse.count(); ++j) {
    double x = pair.coarse.points[j];
    StreamRng rng(5);
    auto r = nested_quantize(pair, {&x, 1}, rng, /*zero_dither=*/true);
    double rec = pair.coarse.points[r.coarse_index] + pair.nested.points[r.nested_index];
    CHECK(rec == doctest::Approx(quantize_nearest(fine, {&x, 1}).point[0]));
  }
}

TEST_CASE("lattice schedule validation") {
  LatticeSchedule sched;
  sched.base = make_scalar_lattice(1.0, 1);
  sched.bound_constant = 4.0;
  std::vector<double> eta = {0.1, 0.05, 0.025};
  sched.zeta = {0.2, 0.1, 0.05};
  CHECK_NOTHROW(validate_schedule(sched, eta));
  sched.zeta = {0.2, 0.2, 0.2};  // violates zeta^2 <= C eta^2 at t = 2
  CHECK_THROWS(validate_schedule(sched, eta));
}
