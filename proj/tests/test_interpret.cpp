#include <doctest.h>

#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "iis/common.hpp"
#include "iis/datastore.hpp"
#include "iis/head.hpp"
#include "iis/interpret.hpp"
#include "iis/oracles.hpp"

using namespace iis;

namespace {

ConceptLibrary make_library(Eigen::MatrixXd vectors,
                            const std::string& kind = "planted") {
  ConceptLibrary lib;
  lib.vectors = std::move(vectors);
  lib.kind = kind;
  for (Eigen::Index j = 0; j < lib.vectors.rows(); ++j) {
    lib.names.push_back("c" + std::to_string(j));
  }
  return lib;
}

std::set<int> support_of(const Eigen::VectorXd& v) {
  std::set<int> s;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (v(i) != 0.0) s.insert(int(i));
  }
  return s;
}

Eigen::VectorXd example_coords() {
  Eigen::VectorXd x(4);
  x << 3.0, -2.0, 1.0, 0.5;
  return x;
}

}  // namespace

TEST_CASE("project with an identity basis returns the representation") {
  ConceptLibrary lib = make_library(Eigen::MatrixXd::Identity(2, 2));
  Eigen::VectorXd x(2);
  x << 3.0, 4.0;
  Eigen::VectorXd p = project(x, lib);
  CHECK(p(0) == 3.0);
  CHECK(p(1) == 4.0);
}

TEST_CASE("project is similarity against each concept row") {
  Eigen::MatrixXd c(3, 2);
  c << 1.0, 0.0,
       0.0, 2.0,
       1.0, 1.0;
  ConceptLibrary lib = make_library(c);
  Eigen::VectorXd x(2);
  x << 3.0, 4.0;
  Eigen::VectorXd p = project(x, lib);
  CHECK(p(0) == 3.0);
  CHECK(p(1) == 8.0);
  CHECK(p(2) == 7.0);

  Eigen::VectorXd wrong(3);
  CHECK_THROWS_AS(project(wrong, lib), UsageError);
}

TEST_CASE("project matches the naive matvec oracle") {
  RandomSource rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    ConceptLibrary lib = make_library(rng.gaussian(6, 8));
    Eigen::MatrixXd X = rng.gaussian(4, 8);
    Eigen::MatrixXd batch = project_batch(X, lib);
    for (Eigen::Index r = 0; r < X.rows(); ++r) {
      Eigen::VectorXd one = project(X.row(r).transpose(), lib);
      Eigen::VectorXd ref = oracle::naive_matvec(lib.vectors, X.row(r).transpose());
      CHECK((one - ref).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((batch.row(r).transpose() - one).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("sparsify reference cases") {
  const Eigen::VectorXd x = example_coords();

  SUBCASE("ascending at s=0.5 shrinks the two survivors") {
    Interpretation out = sparsify(x, 0.5, SparsifyMode::ascending);
    Eigen::VectorXd expect(4);
    expect << 6.0, -2.0, 0.0, 0.0;
    CHECK((out.values - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(out.active == std::vector<int>{0, 1});
    CHECK(out.sparsity == 0.5);
    CHECK(out.mode == SparsifyMode::ascending);
  }
  SUBCASE("hard threshold at s=0.5 masks without shrinking") {
    Interpretation out = sparsify(x, 0.5, SparsifyMode::hard_threshold);
    Eigen::VectorXd expect(4);
    expect << 3.0, -2.0, 0.0, 0.0;
    CHECK((out.values - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(out.active == std::vector<int>{0, 1});
  }
  SUBCASE("ascending at s=0 applies the zero threshold verbatim") {
    Interpretation out = sparsify(x, 0.0, SparsifyMode::ascending);
    Eigen::VectorXd expect(4);
    expect << 9.0, -4.0, 1.0, 0.25;
    CHECK((out.values - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(out.active.size() == 4);
  }
  SUBCASE("descending zeroes the largest magnitudes") {
    Interpretation half = sparsify(x, 0.5, SparsifyMode::descending);
    Eigen::VectorXd expect(4);
    expect << 0.0, 0.0, 1.0, 0.75;
    CHECK((half.values - expect).cwiseAbs().maxCoeff() == 0.0);

    // At s=0 the cutoff count clamps to one, removing only the maximum.
    Interpretation zero = sparsify(x, 0.0, SparsifyMode::descending);
    Eigen::VectorXd expect0(4);
    expect0 << 0.0, -2.0, 2.0, 1.25;
    CHECK((zero.values - expect0).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("sparsify input validation") {
  const Eigen::VectorXd x = example_coords();
  CHECK_THROWS_AS(sparsify(x, 1.0, SparsifyMode::ascending), UsageError);
  CHECK_THROWS_AS(sparsify(x, -0.1, SparsifyMode::ascending), UsageError);
  CHECK_THROWS_AS(sparsify(x, 0.5, SparsifyMode::clustering), UsageError);

  Eigen::VectorXd bad = x;
  bad(2) = std::nan("");
  CHECK_THROWS_AS(sparsify(bad, 0.5, SparsifyMode::ascending), NumericError);
}

TEST_CASE("sparsify mode names roundtrip") {
  for (SparsifyMode m :
       {SparsifyMode::ascending, SparsifyMode::descending,
        SparsifyMode::hard_threshold, SparsifyMode::clustering}) {
    CHECK(sparsify_mode_from_name(sparsify_mode_name(m)) == m);
  }
  CHECK(sparsify_mode_from_name("hard") == SparsifyMode::hard_threshold);
  CHECK_THROWS_AS(sparsify_mode_from_name("soft"), UsageError);
}

TEST_CASE("support never exceeds the kept-concept budget") {
  RandomSource rng(91);
  for (int rep = 0; rep < 400; ++rep) {
    const Eigen::Index m = Eigen::Index(rng.below(12)) + 1;
    const double s = rng.uniform();
    const Eigen::VectorXd x = rng.gaussian(m, 1).col(0);
    const double budget = std::ceil((1.0 - s) * double(m) + 1e-9);
    for (SparsifyMode mode :
         {SparsifyMode::ascending, SparsifyMode::hard_threshold}) {
      Interpretation out = sparsify(x, s, mode);
      CHECK(double(out.active.size()) <= budget);
      // Active indices are exactly the nonzero positions.
      std::set<int> nz = support_of(out.values);
      CHECK(std::set<int>(out.active.begin(), out.active.end()) == nz);
    }
  }
}

TEST_CASE("ascending sparsify is degree-2 homogeneous with scale-free support") {
  RandomSource rng(17);
  const Eigen::VectorXd x = rng.gaussian(9, 1).col(0);
  const Interpretation base = sparsify(x, 0.4, SparsifyMode::ascending);

  for (double alpha : {0.5, 2.0, 4.0}) {
    // Powers of two scale without rounding, so equality is exact.
    Interpretation scaled = sparsify(alpha * x, 0.4, SparsifyMode::ascending);
    CHECK((scaled.values - alpha * alpha * base.values).cwiseAbs().maxCoeff() ==
          0.0);
    CHECK(scaled.active == base.active);
  }
  Interpretation scaled = sparsify(3.7 * x, 0.4, SparsifyMode::ascending);
  CHECK((scaled.values - 3.7 * 3.7 * base.values).cwiseAbs().maxCoeff() <
        1e-12);
  CHECK(scaled.active == base.active);
}

TEST_CASE("support shrinks monotonically in s") {
  RandomSource rng(23);
  for (SparsifyMode mode :
       {SparsifyMode::ascending, SparsifyMode::hard_threshold}) {
    for (int rep = 0; rep < 10; ++rep) {
      const Eigen::VectorXd x = rng.gaussian(10, 1).col(0);
      std::set<int> prev = support_of(sparsify(x, 0.0, mode).values);
      for (double s = 0.1; s < 1.0; s += 0.1) {
        std::set<int> cur = support_of(sparsify(x, s, mode).values);
        CHECK(std::includes(prev.begin(), prev.end(), cur.begin(), cur.end()));
        prev = cur;
      }
    }
  }
}

TEST_CASE("threshold ties only reduce the support") {
  Eigen::VectorXd x(4);
  x << 2.0, 2.0, 1.0, 1.0;
  // At s=0.25 the cutoff is 1, and both tied coordinates at the cutoff drop.
  Interpretation out = sparsify(x, 0.25, SparsifyMode::ascending);
  CHECK(out.active == std::vector<int>{0, 1});
  CHECK(out.values(0) == 2.0);
  CHECK(out.values(1) == 2.0);

  Interpretation hard = sparsify(x, 0.25, SparsifyMode::hard_threshold);
  CHECK(hard.active == std::vector<int>{0, 1});
}

TEST_CASE("cluster_concepts groups by vector similarity") {
  Eigen::MatrixXd c(4, 3);
  c << 1.0, 0.0, 0.0,
       0.9, 0.1, 0.0,
       0.0, 1.0, 0.0,
       0.0, 0.9, 0.1;
  ConceptLibrary lib = make_library(c);

  ConceptGrouping g = cluster_concepts(lib, 0.5, 7);
  CHECK(g.n_groups == 2);
  CHECK(g.names == std::vector<std::string>{"group0", "group1"});
  CHECK(g.group_of[0] == g.group_of[1]);
  CHECK(g.group_of[2] == g.group_of[3]);
  CHECK(g.group_of[0] != g.group_of[2]);

  SUBCASE("group count follows the kept-concept budget") {
    CHECK(cluster_concepts(lib, 0.0, 7).n_groups == 4);
    CHECK(cluster_concepts(lib, 0.9, 7).n_groups == 1);
  }
  SUBCASE("s=0 grouping is a permutation of singletons") {
    ConceptGrouping fine = cluster_concepts(lib, 0.0, 7);
    std::set<int> seen(fine.group_of.begin(), fine.group_of.end());
    CHECK(seen.size() == 4);
  }
}

TEST_CASE("apply_grouping averages coordinates within groups") {
  ConceptGrouping g;
  g.group_of = {0, 1, 0, 1};
  g.n_groups = 2;
  g.names = {"group0", "group1"};
  Eigen::VectorXd coords(4);
  coords << 1.0, 2.0, 3.0, 4.0;
  Eigen::VectorXd out = apply_grouping(coords, g);
  CHECK(out(0) == 2.0);
  CHECK(out(1) == 3.0);

  Eigen::VectorXd wrong(3);
  CHECK_THROWS_AS(apply_grouping(wrong, g), UsageError);
}

TEST_CASE("clustering sparsify equals grouping applied to the projection") {
  RandomSource rng(41);
  ConceptLibrary lib = make_library(rng.gaussian(6, 4));
  Eigen::VectorXd coords = rng.gaussian(6, 1).col(0);

  Interpretation out = sparsify(coords, 0.5, SparsifyMode::clustering, &lib, 9);
  ConceptGrouping g = cluster_concepts(lib, 0.5, 9);
  Eigen::VectorXd ref = apply_grouping(coords, g);
  CHECK(out.values.size() == g.n_groups);
  CHECK((out.values - ref).cwiseAbs().maxCoeff() == 0.0);

  Eigen::VectorXd short_coords(5);
  CHECK_THROWS_AS(
      sparsify(short_coords, 0.5, SparsifyMode::clustering, &lib, 9),
      UsageError);
}

TEST_CASE("sparsify_batch matches per-row sparsify") {
  RandomSource rng(53);
  Eigen::MatrixXd coords = rng.gaussian(6, 5);
  for (SparsifyMode mode : {SparsifyMode::ascending, SparsifyMode::descending,
                            SparsifyMode::hard_threshold}) {
    Eigen::MatrixXd batch = sparsify_batch(coords, 0.3, mode);
    for (Eigen::Index r = 0; r < coords.rows(); ++r) {
      Interpretation one = sparsify(coords.row(r).transpose(), 0.3, mode);
      CHECK((batch.row(r).transpose() - one.values).cwiseAbs().maxCoeff() ==
            0.0);
    }
  }

  SUBCASE("clustering batch applies one shared grouping") {
    ConceptGrouping g;
    g.group_of = {0, 0, 1, 1, 2};
    g.n_groups = 3;
    g.names = {"group0", "group1", "group2"};
    Eigen::MatrixXd batch =
        sparsify_batch(coords, 0.5, SparsifyMode::clustering, &g);
    REQUIRE(batch.cols() == 3);
    for (Eigen::Index r = 0; r < coords.rows(); ++r) {
      Eigen::VectorXd ref = apply_grouping(coords.row(r).transpose(), g);
      CHECK((batch.row(r).transpose() - ref).cwiseAbs().maxCoeff() == 0.0);
    }
    CHECK_THROWS_AS(sparsify_batch(coords, 0.5, SparsifyMode::clustering),
                    UsageError);
  }
}

TEST_CASE("explain ranks concepts by absolute contribution") {
  ConceptLibrary lib = make_library(Eigen::MatrixXd::Identity(2, 2));
  LinearHead head;
  head.weights = Eigen::MatrixXd::Identity(2, 2);
  head.bias = Eigen::VectorXd::Zero(2);
  head.input_kind = HeadInputKind::interpretation;
  head.n_classes = 2;

  Eigen::VectorXd x(2);
  x << 3.0, 1.0;

  SUBCASE("designated concept comes first") {
    Explanation e = explain(x, lib, head, 0.0, SparsifyMode::ascending, 2);
    CHECK(e.predicted == 0);
    REQUIRE(e.top.size() == 2);
    CHECK(e.top[0].index == 0);
    CHECK(e.top[0].name == "c0");
    CHECK(e.top[0].contribution == 9.0);  // x|x| feeds the class-0 weight
    CHECK(e.top[1].contribution == 0.0);
    CHECK_FALSE(e.k_clamped);
  }
  SUBCASE("zero input gives zero contributions in stable index order") {
    Explanation e = explain(Eigen::VectorXd::Zero(2), lib, head, 0.0,
                            SparsifyMode::ascending, 2);
    REQUIRE(e.top.size() == 2);
    CHECK(e.top[0].index == 0);
    CHECK(e.top[1].index == 1);
    CHECK(e.top[0].contribution == 0.0);
    CHECK(e.top[1].contribution == 0.0);
  }
  SUBCASE("k larger than the library clamps") {
    Explanation e = explain(x, lib, head, 0.0, SparsifyMode::ascending, 10);
    CHECK(e.k_clamped);
    CHECK(e.top.size() == 2);
  }
  SUBCASE("k below one is rejected") {
    CHECK_THROWS_AS(explain(x, lib, head, 0.0, SparsifyMode::ascending, 0),
                    UsageError);
  }
}

TEST_CASE("explain matches a brute-force contribution sort") {
  RandomSource rng(67);
  for (int rep = 0; rep < 5; ++rep) {
    ConceptLibrary lib = make_library(rng.gaussian(6, 4));
    LinearHead head;
    head.weights = rng.gaussian(6, 3);
    head.bias = rng.gaussian(3, 1).col(0);
    head.input_kind = HeadInputKind::interpretation;
    head.n_classes = 3;
    Eigen::VectorXd x = rng.gaussian(4, 1).col(0);

    Explanation e = explain(x, lib, head, 0.3, SparsifyMode::ascending, 6);

    Interpretation interp =
        sparsify(project(x, lib), 0.3, SparsifyMode::ascending);
    const int pred = head_predict(head, interp.values);
    CHECK(e.predicted == pred);
    std::vector<std::pair<double, int>> ref;
    for (Eigen::Index j = 0; j < 6; ++j) {
      ref.emplace_back(interp.values(j) * head.weights(j, pred), int(j));
    }
    std::stable_sort(ref.begin(), ref.end(), [](const auto& a, const auto& b) {
      return std::abs(a.first) > std::abs(b.first);
    });
    REQUIRE(e.top.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(e.top[i].index == ref[i].second);
      CHECK(e.top[i].contribution == ref[i].first);
      CHECK(e.top[i].name == lib.names[std::size_t(ref[i].second)]);
    }
  }
}

TEST_CASE("intervene reports exact logit deltas") {
  RandomSource rng(73);
  ConceptLibrary lib = make_library(rng.gaussian(5, 4));
  LinearHead head;
  head.weights = rng.gaussian(5, 3);
  head.bias = rng.gaussian(3, 1).col(0);
  head.input_kind = HeadInputKind::interpretation;
  head.n_classes = 3;
  Eigen::VectorXd x = rng.gaussian(4, 1).col(0);

  Intervention iv = intervene(x, lib, head, 0.2, SparsifyMode::ascending,
                              {1, 3});
  Interpretation interp =
      sparsify(project(x, lib), 0.2, SparsifyMode::ascending);
  Eigen::VectorXd delta =
      interp.values(1) * head.weights.row(1).transpose() +
      interp.values(3) * head.weights.row(3).transpose();
  CHECK((iv.logits_after - (iv.logits_before - delta)).cwiseAbs().maxCoeff() <
        1e-12);
  CHECK(iv.predicted_before == head_predict(head, interp.values));

  SUBCASE("zeroing nothing changes nothing") {
    Intervention same =
        intervene(x, lib, head, 0.2, SparsifyMode::ascending, {});
    CHECK(same.predicted_before == same.predicted_after);
    CHECK((same.logits_before - same.logits_after).cwiseAbs().maxCoeff() ==
          0.0);
  }
  SUBCASE("out-of-range indices are rejected") {
    CHECK_THROWS_AS(
        intervene(x, lib, head, 0.2, SparsifyMode::ascending, {5}),
        UsageError);
    CHECK_THROWS_AS(
        intervene(x, lib, head, 0.2, SparsifyMode::ascending, {-1}),
        UsageError);
  }
}

TEST_CASE("intervene can flip the prediction") {
  ConceptLibrary lib = make_library(Eigen::MatrixXd::Identity(2, 2));
  LinearHead head;
  head.weights = Eigen::MatrixXd::Identity(2, 2);
  head.bias = Eigen::VectorXd::Zero(2);
  head.input_kind = HeadInputKind::interpretation;
  head.n_classes = 2;
  Eigen::VectorXd x(2);
  x << 3.0, 1.0;

  Intervention iv =
      intervene(x, lib, head, 0.0, SparsifyMode::ascending, {0});
  CHECK(iv.predicted_before == 0);
  CHECK(iv.predicted_after == 1);
}

TEST_CASE("explain and intervene work in clustering mode") {
  Eigen::MatrixXd c(4, 3);
  c << 1.0, 0.0, 0.0,
       0.9, 0.1, 0.0,
       0.0, 1.0, 0.0,
       0.0, 0.9, 0.1;
  ConceptLibrary lib = make_library(c);
  ConceptGrouping g = cluster_concepts(lib, 0.5, 7);
  REQUIRE(g.n_groups == 2);

  LinearHead head;
  head.weights = Eigen::MatrixXd::Identity(2, 2);
  head.bias = Eigen::VectorXd::Zero(2);
  head.input_kind = HeadInputKind::interpretation;
  head.n_classes = 2;
  Eigen::VectorXd x(3);
  x << 1.0, 0.1, 0.0;

  Explanation e =
      explain(x, lib, head, 0.5, SparsifyMode::clustering, 2, &g);
  REQUIRE(e.top.size() == 2);
  CHECK(e.top[0].name.rfind("group", 0) == 0);

  Intervention iv = intervene(x, lib, head, 0.5, SparsifyMode::clustering,
                              {0}, &g);
  Eigen::VectorXd grouped = apply_grouping(project(x, lib), g);
  CHECK((iv.logits_before - head_logits(head, grouped)).cwiseAbs().maxCoeff() ==
        0.0);

  CHECK_THROWS_AS(
      explain(x, lib, head, 0.5, SparsifyMode::clustering, 2, nullptr),
      UsageError);
}
