#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <set>

#include "dlvit/error.hpp"
#include "dlvit/vit.hpp"
#include "model_checks.hpp"

using namespace dlvit;
using namespace dlvit::testing;

namespace {

ModelConfig small_config(std::size_t image = 16, std::size_t patch = 4, std::size_t depth = 2, std::size_t dim = 16) {
  ModelConfig c;
  c.image_size = image;
  c.patch_size = patch;
  c.channels = 3;
  c.depth = depth;
  c.heads = 2;
  c.dim = dim;
  c.mlp_ratio = 2;
  c.num_classes = 5;
  return c;
}

}  // namespace

TEST_CASE("config invariants") {
  ModelConfig c = small_config(32, 8);
  CHECK(c.num_patches() == 16);
  ModelConfig bad = c;
  bad.image_size = 30;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(ModelConfig{}.num_patches() == 64);
}

TEST_CASE("zero image embeds to the positional embeddings") {
  ModelConfig c = small_config();
  VitModel m = VitModel::init(c, 1);
  std::vector<float> img(c.pixel_count(), 0.0f);
  TokenMatrix t = m.embed(img);
  REQUIRE(t.size() == c.num_patches());
  for (std::size_t i = 0; i < c.num_patches(); ++i)
    for (std::size_t j = 0; j < c.dim; ++j) CHECK(t.patch_tokens.at(i, j) == m.pos_embed().at(i + 1, j));
  CHECK_THROWS_AS(m.embed(std::vector<float>(c.pixel_count() - 1)), ConfigError);
}

TEST_CASE("perturbing one patch changes exactly one projected row") {
  ModelConfig c = small_config();
  VitModel m = VitModel::init(c, 2);
  SplitMix64 rng(9);
  auto img = random_image(c, rng);
  Tensor before = m.patch_projection(img);
  // pixel (row 5, col 9) of channel 1 lies in patch (1, 2) -> index 1*4 + 2
  img[(1 * c.image_size + 5) * c.image_size + 9] += 0.5f;
  Tensor after = m.patch_projection(img);
  for (std::size_t i = 0; i < c.num_patches(); ++i) {
    bool changed = false;
    for (std::size_t j = 0; j < c.dim; ++j) changed = changed || before.at(i, j) != after.at(i, j);
    CHECK(changed == (i == 6));
  }
}

TEST_CASE("all-keep mask is bit-identical to no mask") {
  ModelConfig c = small_config();
  VitModel m = VitModel::init(c, 3);
  randomize(m, 4, 0.2);
  SplitMix64 rng(5);
  TokenMatrix t = m.embed(random_image(c, rng));
  KeepMask all = KeepMask::all(c.num_patches());
  CHECK(m.forward(t).vec() == m.forward(t, &all).vec());
}

TEST_CASE("masking a token equals deleting it") {
  ModelConfig c = small_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) CHECK(drop_vs_mask_trial(c, seed) < 1e-5);
}

TEST_CASE("forward matches the double-precision reference on a pencil-sized model") {
  ModelConfig c;
  c.image_size = 2;
  c.patch_size = 1;
  c.channels = 1;
  c.depth = 1;
  c.heads = 1;
  c.dim = 4;
  c.mlp_ratio = 1;
  c.num_classes = 2;
  // N = 4 patches of one pixel; keep two of them so the sequence has 3 rows.
  VitModel m = VitModel::init(c, 6);
  randomize(m, 7, 0.5);
  const std::vector<float> img = {0.25f, 0.5f, 0.75f, 1.0f};
  KeepMask mask(std::vector<std::uint8_t>{1, 0, 0, 1});
  Tensor got = m.forward(m.embed(img), &mask);
  auto want = reference_logits(m, img, {0, 3});
  for (std::size_t k = 0; k < 2; ++k) CHECK(got.data()[k] == doctest::Approx(want[k]).epsilon(1e-5));
}

TEST_CASE("forward matches the reference on random configs and masks") {
  SplitMix64 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    ModelConfig c = small_config(8 + 4 * rng.below(2), 4, 1 + rng.below(3), 8);
    VitModel m = VitModel::init(c, rng());
    randomize(m, rng(), 0.2);
    auto img = random_image(c, rng);
    KeepMask mask = random_mask(c.num_patches(), rng);
    Tensor got = m.forward(m.embed(img), &mask);
    auto want = reference_logits(m, img, mask.kept_indices());
    for (std::size_t k = 0; k < c.num_classes; ++k) CHECK(got.data()[k] == doctest::Approx(want[k]).epsilon(1e-4));
  }
}

TEST_CASE("masked_variant") {
  ModelConfig c = small_config(8, 4);  // N = 4
  VitModel m = VitModel::init(c, 8);
  randomize(m, 9, 0.4);
  SplitMix64 rng(10);
  TokenMatrix t = m.embed(random_image(c, rng));
  const std::vector<int> label = {1};

  SUBCASE("mask then unmask restores logits") {
    KeepMask k = masked_variant(t, 2);
    CHECK_FALSE(k.kept(2));
    k.set(2, true);
    CHECK(m.forward(t, &k).vec() == m.forward(t).vec());
  }
  SUBCASE("masking an already-masked token is a no-op") {
    KeepMask base = masked_variant(t, 1);
    KeepMask again = masked_variant(t, 1, &base);
    CHECK(m.forward(t, &again).vec() == m.forward(t, &base).vec());
  }
  SUBCASE("each single-token variant gives its own loss") {
    std::set<float> losses;
    for (std::size_t i = 0; i < 4; ++i) {
      KeepMask k = masked_variant(t, i);
      losses.insert(cross_entropy(m.forward(t, &k), label).item());
    }
    CHECK(losses.size() == 4);
  }
  CHECK_THROWS_AS(masked_variant(t, 4), IndexError);
}

TEST_CASE("a mask that drops everything is rejected") {
  ModelConfig c = small_config(8, 4);
  VitModel m = VitModel::init(c, 1);
  TokenMatrix t = m.embed(std::vector<float>(c.pixel_count(), 0.1f));
  KeepMask none(std::vector<std::uint8_t>(4, 0));
  CHECK_THROWS_AS(m.forward(t, &none), ContractError);
  KeepMask wrong = KeepMask::all(3);
  CHECK_THROWS_AS(m.forward(t, &wrong), ContractError);
}

TEST_CASE("permuting kept tokens leaves the logits unchanged") {
  ModelConfig c = small_config();
  SplitMix64 rng(12);
  for (int trial = 0; trial < 10; ++trial) {
    VitModel m = VitModel::init(c, rng());
    randomize(m, rng(), 0.2);
    TokenMatrix t = m.embed(random_image(c, rng));
    KeepMask mask = random_mask(c.num_patches(), rng);
    Tensor base = m.forward(t, &mask);

    std::vector<std::size_t> perm(c.num_patches());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    TokenMatrix shuffled = t;
    shuffled.patch_tokens = gather_rows(t.patch_tokens, perm);
    KeepMask pmask = KeepMask::all(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) pmask.set(i, mask.kept(perm[i]));
    CHECK(max_rel_diff(base.data(), m.forward(shuffled, &pmask).data()) < 1e-5);
  }
}

TEST_CASE("zero-embed mode still lets dropped tokens attract attention") {
  ModelConfig c = small_config(8, 4);
  VitModel m = VitModel::init(c, 13);
  randomize(m, 14, 0.4);
  SplitMix64 rng(15);
  TokenMatrix t = m.embed(random_image(c, rng));
  KeepMask mask = masked_variant(t, 0);
  ForwardOptions zero{MaskMode::zero_embed, false};
  ForwardOptions zero_pre{MaskMode::zero_embed, true};
  const auto attn = m.forward(t, &mask).vec();
  const auto ze = m.forward(t, &mask, nullptr, zero).vec();
  const auto zp = m.forward(t, &mask, nullptr, zero_pre).vec();
  CHECK(attn != ze);
  CHECK(ze != zp);
  // zero-embed equals an explicit zero row fed without any mask
  TokenMatrix zeroed = t;
  zeroed.patch_tokens = t.patch_tokens.detach();
  std::fill_n(zeroed.patch_tokens.data().begin(), c.dim, 0.0f);
  CHECK(m.forward(zeroed).vec() == ze);
}

TEST_CASE("model gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto r = model_gradient_trial(seed);
    INFO("seed " << seed);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("state round-trips through from_tensors") {
  ModelConfig c = small_config();
  VitModel m = VitModel::init(c, 16);
  std::map<std::string, Tensor> tensors;
  for (auto& [k, v] : m.state()) tensors[k] = v;
  VitModel back = VitModel::from_tensors(tensors);
  CHECK(back.config() == c);
  auto a = m.named_parameters(), b = back.named_parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].second.vec() == b[i].second.vec());
  tensors.erase("vit.head.w");
  CHECK_THROWS_AS(VitModel::from_tensors(tensors), ConfigError);
}
