#include "dfd/config_fields.hpp"
#include "dfd/data.hpp"
#include "test_support.hpp"

#include <map>
#include <random>
#include <set>

using namespace dfd;
namespace fs = std::filesystem;

namespace {

DatasetManifest synthetic(int train_real, int train_fake, int test_real, int test_fake) {
  std::vector<LabeledImage> records;
  auto add = [&](Split s, Label l, int n) {
    for (int i = 0; i < n; ++i) {
      const std::string id = to_string(s) + "-" + to_string(l) + "-" + std::to_string(i);
      records.push_back({id, id + ".png", l, s});
    }
  };
  add(Split::train, Label::real, train_real);
  add(Split::train, Label::fake, train_fake);
  add(Split::test, Label::real, test_real);
  add(Split::test, Label::fake, test_fake);
  return make_manifest(std::move(records));
}

std::set<std::string> ids_in(const DatasetManifest& m, Split s) {
  std::set<std::string> out;
  for (const auto* r : m.in_split(s)) out.insert(r->id);
  return out;
}

}  // namespace

TEST_CASE("manifest loading") {
  const auto dir = test::scratch_dir("data_load");
  SUBCASE("ten rows") {
    std::string text = "path,label,split\n";
    for (int i = 0; i < 10; ++i) {
      text += "img/" + std::to_string(i) + ".png," + (i % 2 ? "fake" : "real") + "," + (i < 6 ? "train" : "test") + "\n";
    }
    const auto m = load_manifest(test::write_text(dir, "m.csv", text), dir);
    CHECK(m.count(Split::train) == 6);
    CHECK(m.count(Split::test) == 4);
    CHECK(m.count(Split::val) == 0);
    CHECK(m.counts_consistent());
    CHECK(m.records[3].id == "img/3");
    CHECK(m.records[3].path == dir / "img/3.png");
  }
  SUBCASE("header only") {
    CHECK_THROWS_WITH_AS(load_manifest(test::write_text(dir, "m.csv", "path,label,split\n"), dir),
                         doctest::Contains("no records"), ValidationError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_manifest(dir / "absent.csv", dir), ValidationError); }
  SUBCASE("bad label reports the line") {
    CHECK_THROWS_WITH_AS(
        load_manifest(test::write_text(dir, "m.csv", "path,label,split\na.png,real,train\nb.png,maybe,test\n"), dir),
        doctest::Contains("row 3"), ValidationError);  // file line, header is line 1
  }
  SUBCASE("bad split") {
    CHECK_THROWS_AS(load_manifest(test::write_text(dir, "m.csv", "path,label,split\na.png,real,dev\n"), dir),
                    ValidationError);
  }
  SUBCASE("val rows are derived, not loaded") {
    CHECK_THROWS_AS(load_manifest(test::write_text(dir, "m.csv", "path,label,split\na.png,real,val\n"), dir),
                    ValidationError);
  }
  SUBCASE("malformed row") {
    CHECK_THROWS_AS(load_manifest(test::write_text(dir, "m.csv", "path,label,split\na.png,real\n"), dir),
                    ValidationError);
  }
  SUBCASE("duplicate id") {
    CHECK_THROWS_WITH_AS(load_manifest(test::write_text(dir, "m.csv",
                                                        "id,path,label,split\nx,a.png,real,train\nx,b.png,fake,test\n"),
                                       dir),
                         doctest::Contains("duplicate"), ValidationError);
  }
  SUBCASE("unreadable image with validation") {
    test::write_text(dir, "broken.png", "not an image");
    const auto file = test::write_text(dir, "m.csv", "path,label,split\nbroken.png,real,train\n");
    CHECK_NOTHROW(load_manifest(file, dir));
    CHECK_THROWS_AS(load_manifest(file, dir, true), ValidationError);
  }
}

TEST_CASE("manifest write/load round trip") {
  const auto dir = test::scratch_dir("data_roundtrip");
  const auto m = test::toy_dataset(dir, 4, 2, 2, 8);
  write_manifest(m, dir / "out.csv");
  const auto back = load_manifest(dir / "out.csv", "/", true, true);
  REQUIRE(back.records.size() == m.records.size());
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    CHECK(back.records[i].id == m.records[i].id);
    CHECK(back.records[i].path == m.records[i].path);
    CHECK(back.records[i].label == m.records[i].label);
    CHECK(back.records[i].split == m.records[i].split);
  }
}

TEST_CASE("half-up rounding") {
  CHECK(round_half_up(116.1) == 116);
  CHECK(round_half_up(0.5) == 1);
  CHECK(round_half_up(2.5) == 3);
  CHECK(round_half_up(0.1 * 1165) == 117);  // 116.49999... in binary
  CHECK(round_half_up(0.49) == 0);
}

TEST_CASE("1161 training records give 116 validation records") {
  for (int fake = 0; fake <= 1161; fake += 43) {
    if (fake < 10 || 1161 - fake < 10) continue;
    const auto out = derive_validation_split(synthetic(1161 - fake, fake, 300, 489), SplitSpec{});
    CHECK(out.count(Split::val) == 116);
    CHECK(out.count(Split::train) == 1045);
    CHECK(out.count(Split::test) == 789);
  }
}

TEST_CASE("small stratified example") {
  SplitSpec spec;
  spec.val_fraction_of_train = 0.2;
  const auto out = derive_validation_split(synthetic(5, 5, 1, 1), spec);
  CHECK(out.count(Split::val, Label::real) == 1);
  CHECK(out.count(Split::val, Label::fake) == 1);
}

TEST_CASE("split derivation is deterministic and seed-dependent") {
  const auto m = synthetic(40, 60, 10, 10);
  SplitSpec a;
  const auto x = derive_validation_split(m, a);
  const auto y = derive_validation_split(m, a);
  CHECK(ids_in(x, Split::val) == ids_in(y, Split::val));
  CHECK(splits_hash(x) == splits_hash(y));
  a.seed += 1;
  CHECK(ids_in(derive_validation_split(m, a), Split::val) != ids_in(x, Split::val));
}

TEST_CASE("split partition and stratification invariants") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> count(5, 400);
  std::uniform_real_distribution<double> frac(0.02, 0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const int tr = count(rng), tf = count(rng);
    const auto m = synthetic(tr, tf, count(rng) / 4, count(rng) / 4);
    SplitSpec spec;
    spec.val_fraction_of_train = frac(rng);
    spec.seed = rng();
    spec.stratified = trial % 4 != 0;
    DatasetManifest out;
    try {
      out = derive_validation_split(m, spec);
    } catch (const ValidationError&) {
      // Only a class quota below one record may be refused.
      CHECK(spec.stratified);
      continue;
    }
    const auto n_val = static_cast<std::int64_t>(std::floor(spec.val_fraction_of_train * (tr + tf) + 0.5));
    CHECK(out.count(Split::val) == n_val);
    CHECK(out.counts_consistent());
    CHECK(out.records.size() == m.records.size());
    CHECK(ids_in(out, Split::test) == ids_in(m, Split::test));
    std::set<std::string> all;
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (const auto& id : ids_in(out, s)) CHECK(all.insert(id).second);
    }
    CHECK(all.size() == m.records.size());
    for (Label l : {Label::real, Label::fake}) {
      CHECK(out.count(Split::train, l) + out.count(Split::val, l) == m.count(Split::train, l));
      if (spec.stratified) {
        const double share = static_cast<double>(m.count(Split::train, l)) / (tr + tf) * n_val;
        CHECK(std::abs(out.count(Split::val, l) - share) <= 1.0);
      }
    }
  }
}

TEST_CASE("derivation preconditions") {
  const auto once = derive_validation_split(synthetic(20, 20, 2, 2), SplitSpec{});
  CHECK_THROWS_AS(derive_validation_split(once, SplitSpec{}), ValidationError);
  CHECK_THROWS_AS(derive_validation_split(synthetic(2, 30, 2, 2), SplitSpec{}), ValidationError);
  SplitSpec bad;
  bad.val_fraction_of_train = 1.0;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("no-skill baseline") {
  CHECK(no_skill_baseline(synthetic(3, 7, 8, 2)) == doctest::Approx(0.2));
  CHECK(train_majority(synthetic(3, 7, 8, 2)) == Label::fake);
  CHECK(no_skill_baseline(synthetic(3, 7, 0, 5)) == 1.0);
  CHECK(train_majority(synthetic(5, 5, 1, 1)) == Label::fake);
  CHECK_THROWS_AS(no_skill_baseline(synthetic(3, 7, 0, 0)), ValidationError);

  // Definition is the train majority, not the best constant classifier.
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> n(1, 30);
  for (int trial = 0; trial < 100; ++trial) {
    const int tr = n(rng), tf = n(rng), er = n(rng), ef = n(rng);
    const double want = (tf >= tr ? ef : er) / static_cast<double>(er + ef);
    CHECK(no_skill_baseline(synthetic(tr, tf, er, ef)) == doctest::Approx(want));
  }
}

TEST_CASE("persisted splits") {
  const auto dir = test::scratch_dir("data_splits");
  const auto raw = synthetic(30, 30, 5, 5);
  const auto split = derive_validation_split(raw, SplitSpec{});
  save_splits(split, SplitSpec{}, dir / "splits.json");
  const auto again = apply_splits(raw, dir / "splits.json");
  CHECK(splits_hash(again) == splits_hash(split));
  CHECK(ids_in(again, Split::val) == ids_in(split, Split::val));
  CHECK_THROWS_AS(apply_splits(synthetic(30, 31, 5, 5), dir / "splits.json"), ValidationError);
}

TEST_CASE("image cache") {
  const auto dir = test::scratch_dir("data_cache");
  std::vector<LabeledImage> records;
  write_png(Image(60, 40, 100), dir / "wide.png");
  write_png(Image(10, 20, 50), dir / "small.png");
  records.push_back({"wide", dir / "wide.png", Label::real, Split::train});
  records.push_back({"small", dir / "small.png", Label::fake, Split::test});
  const auto cached = prepare_cache(make_manifest(records), dir / "cache", 20);
  CHECK(fs::exists(dir / "cache" / "cache_meta.json"));
  const Image wide = read_image(cached.records[0].path);
  CHECK(wide.height == 20);
  CHECK(wide.width == 30);
  const Image small = read_image(cached.records[1].path);
  CHECK(small.width == 10);
  CHECK(small.height == 20);
  const auto meta = nlohmann::json::parse(read_file(dir / "cache" / "cache_meta.json"));
  CHECK(meta.at("cache_short_side") == 20);
  const auto t0 = fs::last_write_time(cached.records[0].path);
  prepare_cache(make_manifest(records), dir / "cache", 20);
  CHECK(fs::last_write_time(cached.records[0].path) == t0);
}
