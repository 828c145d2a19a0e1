#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ogfr/error.hpp"
#include "ogfr/model.hpp"
#include "ogfr/retrieval.hpp"
#include "ogfr/rng.hpp"

using namespace ogfr;

namespace {

constexpr std::size_t K = 8, D = 6;

std::vector<double> random_vec(Rng& rng, std::size_t n = D) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

GalleryEntry random_entry(Rng& rng, int id, int camera, std::uint8_t visible) {
  GalleryEntry e;
  e.identity = id, e.camera = camera;
  e.global = random_vec(rng);
  for (std::size_t i = 0; i < K; ++i) e.parts.push_back(random_vec(rng));
  e.visibility.assign(K, visible);
  return e;
}

}  // namespace

TEST_CASE("distance collapse cases") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const GalleryEntry q = random_entry(rng, 0, 0, 0), g = random_entry(rng, 1, 1, 0);
    CHECK(distance(q, g) == euclidean(q.global, g.global));

    const GalleryEntry v = random_entry(rng, 0, 0, 1);
    CHECK(distance(v, v) == 0.0);

    // Every part offset by the same vector as the global feature.
    GalleryEntry a = random_entry(rng, 0, 0, 1), b = a;
    const std::vector<double> shift = random_vec(rng);
    for (std::size_t c = 0; c < D; ++c) {
      b.global[c] += shift[c];
      for (auto& p : b.parts) p[c] += shift[c];
    }
    CHECK(std::abs(distance(a, b) - euclidean(a.global, b.global)) <= 1e-12);
  }
}

TEST_CASE("distance: hand case, visibility gating and properties") {
  GalleryEntry q, g;
  q.global = {0, 0}, g.global = {3, 4};  // d_g = 5
  q.parts = {{0, 0}, {0, 0}}, g.parts = {{1, 0}, {0, 7}};
  q.visibility = {1, 1}, g.visibility = {1, 0};
  CHECK(distance(q, g) == doctest::Approx((5.0 + 1.0) / 2.0));

  // A part hidden on either side is ignored, whatever its features.
  g.parts[1] = {100, 100};
  CHECK(distance(q, g) == doctest::Approx(3.0));

  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    GalleryEntry a = random_entry(rng, 0, 0, 1), b = random_entry(rng, 1, 1, 1);
    for (std::size_t i = 0; i < K; ++i) a.visibility[i] = b.visibility[i] = rng.below(2);
    CHECK(distance(a, b) == doctest::Approx(distance(b, a)).epsilon(1e-14));
    CHECK(distance(a, b) >= 0.0);
  }

  g.parts.pop_back();
  CHECK_THROWS_AS(distance(q, g), DimensionError);
}

TEST_CASE("exact cross-camera copies give perfect scores") {
  Rng rng(3);
  std::vector<GalleryEntry> query, gallery;
  for (int id = 0; id < 10; ++id) {
    query.push_back(random_entry(rng, id, 0, 1));
    GalleryEntry copy = query.back();
    copy.camera = 1;
    gallery.push_back(copy);
  }
  const EvalResult r = evaluate(query, gallery);
  CHECK(r.rank1 == 1.0);
  CHECK(r.mAP == 1.0);
  CHECK(r.n_valid_queries == 10);
}

TEST_CASE("random features sit at chance level") {
  double mean_rank1 = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<GalleryEntry> query, gallery;
    for (int id = 0; id < 10; ++id) {
      for (int i = 0; i < 5; ++i) query.push_back(random_entry(rng, id, 0, static_cast<std::uint8_t>(rng.below(2))));
      for (int cam = 1; cam <= 2; ++cam) gallery.push_back(random_entry(rng, id, cam, 1));
    }
    mean_rank1 += evaluate(query, gallery).rank1 / 20.0;
  }
  CHECK(mean_rank1 > 0.05);
  CHECK(mean_rank1 < 0.15);
}

TEST_CASE("hand-enumerated CMC and mAP on 3 queries and 6 gallery entries") {
  const std::vector<int> gid = {0, 1, 0, 2, 1, 2}, gcam = {1, 1, 2, 1, 2, 2};
  const std::vector<int> qid = {0, 1, 2}, qcam = {0, 0, 1};
  const std::vector<double> dist = {
      0.5, 0.1, 0.9, 0.2, 0.3, 0.4,   // true matches at ranks 5 and 6
      0.3, 0.1, 0.2, 0.4, 0.5, 0.6,   // ranks 1 and 5
      0.1, 0.2, 0.3, 0.05, 0.4, 0.5,  // nearest match shares the camera
  };
  const double ap0 = (1.0 / 5 + 2.0 / 6) / 2, ap1 = (1.0 + 2.0 / 5) / 2;

  const EvalResult r = evaluate_distances(dist, qid, qcam, gid, gcam);
  CHECK(r.rank1 == doctest::Approx(1.0 / 3));
  CHECK(r.rank5 == doctest::Approx(1.0));
  CHECK(r.mAP == doctest::Approx((ap0 + ap1 + 1.0 / 5) / 3));

  const EvalResult open = evaluate_distances(dist, qid, qcam, gid, gcam, EvalOptions{false, false});
  CHECK(open.rank1 == doctest::Approx(2.0 / 3));
  CHECK(open.mAP == doctest::Approx((ap0 + ap1 + (1.0 + 2.0 / 6) / 2) / 3));

  // A monotone transform of every distance changes nothing.
  std::vector<double> warped = dist;
  for (double& d : warped) d = std::exp(3 * d) + 1;
  const EvalResult w = evaluate_distances(warped, qid, qcam, gid, gcam);
  CHECK(w.rank1 == r.rank1);
  CHECK(w.mAP == r.mAP);
}

TEST_CASE("evaluation input errors") {
  CHECK_THROWS_AS(evaluate_distances({}, {0}, {0}, {}, {}), ConfigError);
  // The only true match shares the query's camera.
  CHECK_THROWS_AS(evaluate_distances({0.1}, {0}, {0}, {0}, {0}), ContractError);
  CHECK_THROWS_AS(evaluate_distances({0.1, 0.2}, {0}, {0}, {0}, {0}), DimensionError);
}

TEST_CASE("visibility uses the per-pixel argmax") {
  Tensor<double> u = Tensor<double>::matrix(3, 4, 0.1);
  u(0, 0) = 0.7;  // background
  u(1, 2) = 0.7;  // part 2
  u(2, 2) = 0.5;  // part 2 again
  CHECK(visibility(u) == std::vector<std::uint8_t>{0, 1, 0});

  Tensor<double> flat = Tensor<double>::matrix(2, 4, 0.25);
  flat(0, 3) = 0.26;
  CHECK(visibility(flat) == std::vector<std::uint8_t>{0, 0, 1});
  CHECK_THROWS_AS(visibility(Tensor<double>::matrix(2, 1, 1.0)), DimensionError);
}
