#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "dlvit/error.hpp"
#include "dlvit/pipeline.hpp"
#include "model_checks.hpp"

using namespace dlvit;
using namespace dlvit::testing;

namespace {

ModelConfig small_config(std::size_t classes, std::size_t depth = 2) {
  ModelConfig c;
  c.image_size = 16;
  c.patch_size = 4;
  c.depth = depth;
  c.heads = 2;
  c.dim = 16;
  c.mlp_ratio = 2;
  c.num_classes = classes;
  return c;
}

Dataset small_data(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  SyntheticSpec s;
  s.image_size = 16;
  s.patch_size = 4;
  s.num_classes = classes;
  s.scale_min = 3.5;
  s.scale_max = 5.0;
  s.jitter = 1.0;
  s.seed = seed;
  return generate_synthetic(s, per_class);
}

bool same_weights(const NamedTensors& a, const NamedTensors& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].first != b[i].first || a[i].second.vec() != b[i].second.vec()) return false;
  return true;
}

// Class 1 images are brighter than class 0 ones: separable by the pixel mean.
Dataset brightness_data(std::size_t per_class, std::uint64_t seed) {
  SplitMix64 rng(seed);
  Dataset d;
  d.image_size = 16;
  d.channels = 3;
  d.num_classes = 2;
  for (std::size_t i = 0; i < 2 * per_class; ++i) {
    Sample s;
    s.id = "img_" + std::to_string(i);
    s.label = static_cast<int>(i % 2);
    s.pixels.resize(3 * 16 * 16);
    for (auto& v : s.pixels) v = static_cast<float>(rng.uniform(0.0, 0.5) + 0.5 * s.label);
    d.samples.push_back(std::move(s));
  }
  return d;
}

TrainSchedule quick(std::size_t epochs, std::uint64_t seed = 1) {
  TrainSchedule s = TrainSchedule::pretrain_defaults();
  s.epochs = epochs;
  s.seed = seed;
  return s;
}

}  // namespace

TEST_CASE("step decay schedule") {
  const TrainSchedule s = TrainSchedule::finetune_defaults();
  CHECK(s.optimizer == Optimizer::sgd);
  CHECK(s.base_lr == 1e-3);
  CHECK(s.weight_decay == 1e-4);
  CHECK(s.epochs == 20);
  for (int e = 0; e < 200; ++e) {
    const double want = 1e-3 * std::pow(0.1, e / 40);
    CHECK(s.lr(e) == doctest::Approx(want).epsilon(1e-12));
    CHECK(s.lr(e) > 0);
    if (e > 0) CHECK(s.lr(e) <= s.lr(e - 1));
  }
  CHECK(s.lr(39.99) == s.lr(0));
}

TEST_CASE("cosine with warmup") {
  TrainSchedule s;
  s.base_lr = 1.0;
  s.epochs = 10;
  s.cosine = true;
  s.warmup_epochs = 2;
  CHECK(s.lr(0) == 0.0);
  CHECK(s.lr(1) == doctest::Approx(0.5 * 0.5 * (1 + std::cos(M_PI * 0.1))));
  CHECK(s.lr(5) == doctest::Approx(0.5));
  CHECK(s.lr(10) == doctest::Approx(0.0));
  for (double e = 2; e < 10; e += 0.25) CHECK(s.lr(e + 0.25) <= s.lr(e));
  s.warmup_epochs = -1;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.warmup_epochs = 0;
  s.base_lr = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("name parsing") {
  CHECK(parse_filter_mode("learned") == FilterMode::learned);
  CHECK(parse_filter_mode("random") == FilterMode::random_discard);
  CHECK(parse_filter_mode("all-keep") == FilterMode::all_keep);
  CHECK(parse_filter_mode("random-init") == FilterMode::random_init);
  CHECK_THROWS_AS(parse_filter_mode("none"), ConfigError);
  for (auto m : {FilterMode::learned, FilterMode::random_discard, FilterMode::all_keep, FilterMode::random_init})
    CHECK(parse_filter_mode(filter_mode_name(m)) == m);
  CHECK(parse_optimizer(optimizer_name(Optimizer::adamw)) == Optimizer::adamw);
  CHECK_THROWS_AS(parse_optimizer("adam9"), ConfigError);
}

TEST_CASE("matched random masks") {
  CHECK(matched_keep_count(0.5, 64) == 32);
  CHECK(matched_keep_count(0.0, 64) == 1);
  CHECK(matched_keep_count(1.0, 64) == 64);
  SplitMix64 rng(3);
  std::set<std::vector<std::uint8_t>> seen;
  for (int i = 0; i < 50; ++i) {
    const KeepMask m = random_keep_mask(64, 20, rng);
    CHECK(m.kept_count() == 20);
    seen.insert({m.bits().begin(), m.bits().end()});
  }
  CHECK(seen.size() > 45);
  SplitMix64 a = image_rng(7, 3), b = image_rng(7, 3), c = image_rng(7, 4);
  CHECK(a() == b());
  CHECK(a() != c());
}

TEST_CASE("zero epochs returns the initialisation; runs are deterministic") {
  const Dataset d = small_data(2, 10, 1);
  const ModelConfig c = small_config(2);
  const VitModel init = VitModel::init(c, 7);
  CHECK(same_weights(pretrain(c, d, quick(0, 7)).named_parameters(), init.named_parameters()));
  const VitModel a = pretrain(c, d, quick(2, 7));
  const VitModel b = pretrain(c, d, quick(2, 7));
  CHECK(same_weights(a.named_parameters(), b.named_parameters()));
  CHECK(!same_weights(a.named_parameters(), init.named_parameters()));
}

TEST_CASE("pretraining learns a two-class set") {
  const Dataset d = brightness_data(40, 2);
  const ModelConfig c = small_config(2, 2);
  std::vector<EpochLog> log;
  const VitModel m = pretrain(c, d, quick(20, 3), &log);
  REQUIRE(log.size() == 20);
  CHECK(log.back().loss < std::log(2.0));
  CHECK(log.back().accuracy >= 0.95);
  EvalOptions o;
  o.measure_throughput = false;
  o.policy.mode = FilterMode::all_keep;
  const EvalReport r = evaluate(m, nullptr, d, o);
  CHECK(r.top1 >= 0.95);
  CHECK(r.top5 == 1.0);
  CHECK(r.keep_ratio == 1.0);
  CHECK(r.macs_filtered == r.macs_full);
  CHECK(r.images == d.size());
}

TEST_CASE("pretraining needs two classes") {
  Dataset d = small_data(2, 5, 1);
  for (auto& s : d.samples) s.label = 0;
  CHECK_THROWS_AS(pretrain(small_config(2), d, quick(1)), TrainingError);
}

TEST_CASE("all-keep fine-tuning is plain training") {
  const Dataset d = small_data(3, 8, 4);
  const ModelConfig c = small_config(3);
  TrainSchedule s = TrainSchedule::finetune_defaults();
  s.epochs = 2;
  s.base_lr = 0.05;
  s.seed = 9;
  const VitModel init = VitModel::init(c, 9);
  const VitModel plain = pretrain(c, d, s);
  FinetuneOptions o;
  o.schedule = s;
  o.policy.mode = FilterMode::all_keep;
  const FinetuneResult ft = finetune(init, FilterMLP{}, d, o);
  CHECK(same_weights(ft.model.named_parameters(), plain.named_parameters()));
  for (const auto& e : ft.log) CHECK(e.keep_ratio == 1.0);
}

TEST_CASE("fine-tuning with each filter mode") {
  const Dataset d = small_data(3, 8, 5);
  const ModelConfig c = small_config(3);
  const VitModel bb = pretrain(c, d, quick(3));
  const FilterMLP filter = FilterMLP::init(c.dim, {}, 4);
  FinetuneOptions o;
  o.schedule.epochs = 2;
  SUBCASE("learned filter is updated through the gates") {
    o.policy.mode = FilterMode::learned;
    const auto r = finetune(bb, filter, d, o);
    CHECK(!same_weights(r.filter.named_parameters(), filter.named_parameters()));
    CHECK(!same_weights(r.model.named_parameters(), bb.named_parameters()));
  }
  SUBCASE("frozen filter") {
    o.policy.mode = FilterMode::learned;
    o.filter_grad = false;
    const auto r = finetune(bb, filter, d, o);
    CHECK(same_weights(r.filter.named_parameters(), filter.named_parameters()));
  }
  SUBCASE("random discard keeps the matched count") {
    o.policy.mode = FilterMode::random_discard;
    o.policy.keep_ratio = 0.5;
    const auto r = finetune(bb, FilterMLP{}, d, o);
    for (const auto& e : r.log) CHECK(e.keep_ratio == 0.5);
  }
  SUBCASE("random-init filter runs end to end") {
    o.policy.mode = FilterMode::random_init;
    o.policy.keep_ratio = 0.25;
    const auto r = finetune(bb, filter, d, o);
    REQUIRE(r.log.size() == 2);
    for (const auto& e : r.log) {
      CHECK(std::isfinite(e.loss));
      CHECK(e.keep_ratio == 0.25);
    }
  }
  SUBCASE("the input backbone is left alone") {
    const auto before = bb.named_parameters();
    std::vector<std::vector<float>> copy;
    for (const auto& [k, v] : before) copy.push_back(v.vec());
    finetune(bb, filter, d, o);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bb.named_parameters()[i].second.vec() == copy[i]);
  }
}

TEST_CASE("drop-mode inference matches masked forwards") {
  const Dataset d = small_data(3, 6, 6);
  const ModelConfig c = small_config(3);
  VitModel m = VitModel::init(c, 2);
  randomize(m, 3, 0.3);
  const FilterMLP filter = FilterMLP::init(c.dim, {}, 5);
  for (FilterMode mode : {FilterMode::learned, FilterMode::random_discard, FilterMode::random_init}) {
    MaskPolicy p;
    p.mode = mode;
    p.keep_ratio = 0.4;
    p.seed = 12;
    const auto drop = infer(m, &filter, d.samples, p);
    const auto mask = infer_masked(m, &filter, d.samples, p);
    REQUIRE(drop.size() == d.size());
    for (std::size_t i = 0; i < drop.size(); ++i) {
      CHECK(drop[i].mask == mask[i].mask);
      CHECK(drop[i].image_id == d.samples[i].id);
      CHECK(max_rel_diff(drop[i].logits, mask[i].logits) < 1e-5);
      CHECK(drop[i].predicted == mask[i].predicted);
    }
  }
}

TEST_CASE("all-keep inference is the plain backbone") {
  const Dataset d = small_data(3, 4, 7);
  const ModelConfig c = small_config(3);
  VitModel m = VitModel::init(c, 2);
  randomize(m, 3, 0.3);
  MaskPolicy p;
  p.mode = FilterMode::all_keep;
  const auto preds = infer(m, nullptr, d.samples, p);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Tensor logits = m.forward(m.embed(d.samples[i].pixels));
    const auto single = infer(m, nullptr, std::span(d.samples).subspan(i, 1), p);
    CHECK(single[0].logits == logits.vec());
    CHECK(max_rel_diff(preds[i].logits, logits.vec()) < 1e-6);
    CHECK(preds[i].mask.kept_count() == c.num_patches());
  }
  // a filter whose last layer is zero keeps everything at the default threshold
  FilterMLP f = FilterMLP::init(c.dim, {}, 1);
  f.zero_last_layer();
  p.mode = FilterMode::learned;
  const auto fp = infer(m, &f, d.samples, p);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(fp[i].logits == preds[i].logits);
}

TEST_CASE("evaluation report") {
  const Dataset d = small_data(6, 5, 8);
  const ModelConfig c = small_config(6);
  VitModel m = VitModel::init(c, 2);
  randomize(m, 4, 0.3);
  const FilterMLP f = FilterMLP::init(c.dim, {}, 3);
  EvalOptions o;
  o.measure_throughput = false;
  o.policy.mode = FilterMode::random_discard;
  o.policy.keep_ratio = 0.5;
  const EvalReport r = evaluate(m, &f, d, o);
  CHECK(r.top5 >= r.top1);
  CHECK(r.keep_ratio == 0.5);
  CHECK(r.macs_filtered < r.macs_full);
  CHECK(r.kept_counts.size() == d.size());
  const EvalReport again = evaluate(m, &f, d, o);
  CHECK(again.top1 == r.top1);
  CHECK(again.predictions == r.predictions);
  o.drop = false;
  CHECK(evaluate(m, &f, d, o).predictions == r.predictions);

  o.policy.mode = FilterMode::learned;
  const EvalReport lr = evaluate(m, &f, d, o);
  CHECK(lr.keep_ratio <= 1.0);
  CHECK(lr.keep_ratio >= static_cast<double>(floor_keep_count(c.num_patches())) / c.num_patches());

  o.measure_throughput = true;
  o.warmup = 2;
  const EvalReport timed = evaluate(m, &f, d, o);
  CHECK(timed.throughput > 0);
  CHECK(format_report(timed).find("top-1") != std::string::npos);
  const auto path = std::filesystem::temp_directory_path() / "dlvit_test_reports.csv";
  write_reports_csv(path, {{"a", r}, {"b", timed}});
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "name,top1,top5,keep_ratio,macs_full,macs_filtered,params,throughput,threads,batch");
  std::filesystem::remove(path);
}
