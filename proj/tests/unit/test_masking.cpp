#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "xmae/masking.hpp"

using namespace xmae;

namespace {

std::size_t first_visible(const MaskSpec& m) {
  for (std::size_t i = 0; i < m.n_patches(); ++i)
    if (m.visible[i]) return i;
  return m.n_patches();
}

}  // namespace

TEST_CASE("floor counts") {
  CHECK(masked_count_for(0.90, 25) == 22);
  CHECK(masked_count_for(0.80, 25) == 20);
  CHECK(masked_count_for(0.60, 25) == 15);
  CHECK(masked_count_for(0.85, 25) == 21);

  const auto c = contiguous_mask(25, 0.90, 3);
  CHECK(c.masked_count() == 22);
  CHECK(c.visible_indices().size() == 3);
  CHECK(c.visible_runs() == 1);
  CHECK(c.ratio == doctest::Approx(22.0 / 25.0));
  CHECK(contiguous_mask(25, 0.80, 3).visible_indices().size() == 5);
  CHECK(random_mask(25, 0.60, 8).masked_count() == 15);
}

TEST_CASE("degenerate ratios are rejected") {
  CHECK(th::error_kind([] { contiguous_mask(25, 0.01, 0); }) == ErrorKind::InvalidRatio);
  CHECK(th::error_kind([] { contiguous_mask(25, 1.0, 0); }) == ErrorKind::InvalidRatio);
  CHECK(th::error_kind([] { random_mask(25, 0.0, 0); }) == ErrorKind::InvalidRatio);
  CHECK(th::error_kind([] { random_mask(10, 0.05, 0); }) == ErrorKind::InvalidRatio);
}

// The frequency checks run 100 000 seeds. At 10 000 the 0.01 band is about
// two standard errors per patch, so some patch misses it by chance.
TEST_CASE("contiguous start offsets are uniform") {
  constexpr int kSeeds = 100000;
  std::vector<int> hits(23, 0);
  for (int s = 0; s < kSeeds; ++s) {
    const auto m = contiguous_mask(25, 0.90, derive_seed({static_cast<std::uint64_t>(s)}));
    REQUIRE(m.visible_runs() == 1);
    const auto start = first_visible(m);
    REQUIRE(start <= 22);
    ++hits[start];
  }
  for (int h : hits) CHECK(std::abs(h / static_cast<double>(kSeeds) - 1.0 / 23.0) <= 0.01);
}

TEST_CASE("random masks hit each patch with the masked fraction") {
  constexpr int kSeeds = 100000;
  std::vector<int> hits(25, 0);
  for (int s = 0; s < kSeeds; ++s) {
    const auto m = random_mask(25, 0.60, derive_seed({static_cast<std::uint64_t>(s)}));
    REQUIRE(m.masked_count() == 15);
    for (auto i : m.masked_indices()) ++hits[i];
  }
  for (int h : hits) CHECK(std::abs(h / static_cast<double>(kSeeds) - 0.6) <= 0.01);
}

TEST_CASE("random masks at 0.9 split the visible patches") {
  int split = 0;
  for (int s = 0; s < 1000; ++s) split += random_mask(25, 0.90, static_cast<std::uint64_t>(s)).visible_runs() > 1;
  CHECK(split >= 900);
}

TEST_CASE("masked count is exact for every ratio and seed") {
  for (std::size_t n : {4u, 10u, 25u, 50u}) {
    for (double r = 0.05; r < 0.999; r += 0.05) {
      const auto k = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
      if (k == 0 || k == n) continue;
      for (std::uint64_t s = 0; s < 5; ++s) {
        CHECK(contiguous_mask(n, r, s).masked_count() == k);
        CHECK(random_mask(n, r, s).masked_count() == k);
        CHECK(contiguous_mask(n, r, s).visible_runs() == 1);
      }
    }
  }
}

TEST_CASE("masks are deterministic in the seed") {
  CHECK(contiguous_mask(25, 0.9, 5).visible == contiguous_mask(25, 0.9, 5).visible);
  CHECK(random_mask(25, 0.6, 5).visible == random_mask(25, 0.6, 5).visible);
  CHECK(make_mask(MaskMode::Random, 25, 0.6, 5).visible == random_mask(25, 0.6, 5).visible);
}

TEST_CASE("expansion to samples") {
  MaskSpec m;
  m.visible = {true, false, true};
  CHECK(expand_to_samples(m, 2) == std::vector<bool>{true, true, false, false, true, true});
  CHECK(m.bitstring() == "101");
  CHECK(expand_to_samples(contiguous_mask(25, 0.9, 1), 40).size() == 1000);
}

TEST_CASE("curriculum steps") {
  CurriculumState s;
  s = curriculum_update(s, 1.00);
  CHECK(s.m_current == 0.80);
  CHECK(*s.best_loss == 1.00);

  auto up = curriculum_update(s, 0.89);
  CHECK(up.m_current == doctest::Approx(0.85));
  CHECK(*up.best_loss == 0.89);

  auto flat = curriculum_update(s, 0.95);
  CHECK(flat.m_current == 0.80);
  CHECK(*flat.best_loss == 0.95);

  CurriculumState top;
  top.m_current = 0.90;
  top.best_loss = 1.0;
  CHECK(curriculum_update(top, 0.01).m_current == doctest::Approx(0.90));

  CHECK(th::error_kind([&] { curriculum_update(s, std::nan("")); }) == ErrorKind::NonFiniteLoss);
  CHECK(th::error_kind([&] { curriculum_update(s, INFINITY); }) == ErrorKind::NonFiniteLoss);
}

TEST_CASE("curriculum is monotone and saturates") {
  xmae::Rng rng(4);
  CurriculumState s;
  int triggers = 0;
  double loss = 1.0;
  for (int e = 0; e < 200; ++e) {
    loss *= rng.uniform(0.75, 1.1);
    const auto next = curriculum_update(s, loss);
    CHECK(next.m_current >= s.m_current);
    CHECK(next.m_current <= s.m_max + 1e-12);
    if (next.m_current > s.m_current) ++triggers;
    s = next;
  }
  CHECK(triggers <= 2);  // ceil((0.90 - 0.80) / 0.05)
}
