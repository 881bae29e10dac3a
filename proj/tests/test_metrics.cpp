#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include <emorec/emorec.hpp>

using namespace emorec;

TEST_CASE("confusion counts land at [truth][pred]") {
  const std::vector<int> preds = {0, 1, 1, 2, 0};
  const std::vector<int> labels = {0, 1, 2, 2, 1};
  const ConfusionMatrix cm = confusion(preds, labels, 3);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(1, 1) == 1);
  CHECK(cm.at(2, 1) == 1);
  CHECK(cm.at(2, 2) == 1);
  CHECK(cm.at(1, 0) == 1);
  CHECK(cm.total() == 5);
  CHECK(cm.diagonal() == 3);
}

TEST_CASE("confusion validates inputs") {
  CHECK_THROWS_AS(confusion({0, 1}, {0}, 2), ShapeError);
  CHECK_THROWS_AS(confusion({0, 2}, {0, 1}, 2), LabelError);
  CHECK_THROWS_AS(confusion({0, 1}, {0, -1}, 2), LabelError);
  CHECK_THROWS_AS(ConfusionMatrix(0), ParamError);
}

TEST_CASE("accuracy and per-class f1 on a hand-worked 3x3 case") {
  // truth\pred     0  1  2        row sums 5, 4, 3
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 4; cm.at(0, 1) = 1;
  cm.at(1, 0) = 1; cm.at(1, 1) = 2; cm.at(1, 2) = 1;
  cm.at(2, 2) = 3;
  // accuracy = 9/12
  CHECK(accuracy_of(cm) == 0.75);
  // class 0: precision 4/5, recall 4/5 -> f1 = 0.8
  CHECK_THAT(f1_of_class(cm, 0), Catch::Matchers::WithinAbs(0.8, 1e-15));
  // class 1: precision 2/3, recall 2/4 -> f1 = 2*(2/3)*(1/2)/(2/3+1/2) = 4/7
  CHECK_THAT(f1_of_class(cm, 1), Catch::Matchers::WithinAbs(4.0 / 7.0, 1e-15));
  // class 2: precision 3/4, recall 3/3 -> f1 = 6/7
  CHECK_THAT(f1_of_class(cm, 2), Catch::Matchers::WithinAbs(6.0 / 7.0, 1e-15));
  CHECK(micro_f1(cm) == accuracy_of(cm));
}

TEST_CASE("f1 returns 0 when a denominator vanishes") {
  // nothing predicted as class 1, nothing truly class 0
  ConfusionMatrix cm(2);
  cm.at(1, 0) = 10;
  CHECK(f1_of_class(cm, 0) == 0.0);  // recall undefined (no true 0s), precision 0
  CHECK(f1_of_class(cm, 1) == 0.0);  // precision undefined (no predicted 1s)

  ConfusionMatrix empty_cls(3);
  empty_cls.at(0, 0) = 5;
  empty_cls.at(1, 1) = 5;
  CHECK(f1_of_class(empty_cls, 2) == 0.0);

  CHECK_THROWS_AS(f1_of_class(cm, 2), LabelError);
  CHECK_THROWS_AS(f1_of_class(cm, -1), LabelError);
}

TEST_CASE("empty matrices refuse to produce metrics") {
  ConfusionMatrix cm(3);
  CHECK_THROWS_AS(accuracy_of(cm), DataError);
  CHECK_THROWS_AS(micro_f1(cm), DataError);
}

TEST_CASE("constant predictor over 814/56 reproduces the degenerate row") {
  // Joy = 0, Neutral = 1 (alphabetical); the predictor always says Neutral
  std::vector<int> labels, preds;
  for (int i = 0; i < 814; ++i) labels.push_back(0);
  for (int i = 0; i < 56; ++i) labels.push_back(1);
  preds.assign(labels.size(), 1);
  const ConfusionMatrix cm = confusion(preds, labels, 2);
  CHECK(cm.total() == 870);
  CHECK_THAT(accuracy_of(cm), Catch::Matchers::WithinAbs(0.0644, 0.00005));
  CHECK(f1_of_class(cm, 0) == 0.0);
}

TEST_CASE("micro f1 equals accuracy exactly on random matrices") {
  SeededRng rng(2024);
  const int ks[] = {2, 3, 5};
  for (int round = 0; round < 1000; ++round) {
    const int k = ks[round % 3];
    ConfusionMatrix cm(k);
    for (auto& c : cm.counts) c = static_cast<int64_t>(rng.uniform() * 50.0);
    if (cm.total() == 0) cm.at(0, 0) = 1;
    REQUIRE(micro_f1(cm) == accuracy_of(cm));
  }
}

TEST_CASE("merge is entrywise addition and matches a single pass") {
  SeededRng rng(9);
  std::vector<int> preds, labels;
  for (int i = 0; i < 200; ++i) {
    preds.push_back(static_cast<int>(rng.uniform() * 3));
    labels.push_back(static_cast<int>(rng.uniform() * 3));
  }
  const ConfusionMatrix whole = confusion(preds, labels, 3);
  ConfusionMatrix merged(3);
  for (int start = 0; start < 200; start += 37) {
    const int stop = std::min(200, start + 37);
    const std::vector<int> p(preds.begin() + start, preds.begin() + stop);
    const std::vector<int> l(labels.begin() + start, labels.begin() + stop);
    merged.merge(confusion(p, l, 3));
  }
  CHECK(merged.counts == whole.counts);
  ConfusionMatrix wrong(4);
  CHECK_THROWS_AS(merged.merge(wrong), ShapeError);
}
