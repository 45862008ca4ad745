/*
    Licensed under the Apache License, Version 2.0 (the "License");
    you may not use this file except in compliance with the License.
    You may obtain a copy of the License at

        https://www.apache.org/licenses/LICENSE-2.0

    Unless required by applicable law or agreed to in writing, software
    distributed under the License is distributed on an "AS IS" BASIS,
    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
    See the License for the specific language governing permissions and
    limitations under the License.
*/

#include "hierforecast/error.hpp"
#include "hierforecast/transfer.hpp"
#include "support.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

using namespace hierforecast;
using namespace hierforecast::transfer;

namespace {

SeriesFrame covariate_frame(std::size_t n, std::uint64_t seed, double sigma, bool interaction) {
    testing::Rng rng(seed);
    std::vector<double> x1(n), x2(n), y(n);
    std::vector<std::string> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        x1[i] = rng.uniform();
        x2[i] = rng.uniform(-1, 1);
        g[i] = rng.uniform() < 0.5 ? "p" : "q";
        y[i] = 2.0 + std::sin(2 * M_PI * x1[i]) + 0.5 * x2[i] + (g[i] == "p" ? 0.3 : -0.3) + sigma * rng.normal();
        if (interaction) y[i] += 1.5 * std::sin(6.0 * x1[i] * x2[i]);
    }
    auto f = testing::frame_of(y);
    f.set_column("x1", Column::numeric(x1));
    f.set_column("x2", Column::numeric(x2));
    f.set_column("g", Column::from_labels(g));
    return f;
}

// Same smoothing parameters as the fitted model, never searched.
gam::LambdaPolicy frozen(const gam::AdditiveModel& m) {
    auto p = gam::LambdaPolicy::fixed_value(1.0);
    for (const auto& t : m.terms) {
        if (t.spec.is_smooth()) p.overrides[t.spec.label()] = t.lambda;
    }
    return p;
}

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
    std::vector<std::size_t> r;
    for (std::size_t i = lo; i < hi; ++i) r.push_back(i);
    return r;
}

forest::ForestConfig small_forest(std::size_t trees, std::uint64_t seed = 3) {
    forest::ForestConfig c;
    c.n_trees = trees;
    c.seed = seed;
    return c;
}

} // namespace

TEST_CASE("empty common set leaves the frame unchanged") {
    const auto f = covariate_frame(300, 1, 0.1, false);
    const auto m = gam::fit("y ~ s(x1) + lin(x2) + cat(g)", f);
    const auto out = transfer_features(m, {}, f);
    CHECK(out.column_names() == f.column_names());
    CHECK(out.target() == f.target());
}

TEST_CASE("transferred columns evaluate the source effects") {
    const auto src = covariate_frame(400, 2, 0.1, false);
    const auto tgt = covariate_frame(200, 3, 0.1, false);
    const auto m = gam::fit("y ~ s(x1, by=g) + lin(x2) + cat(g)", src);

    const auto out = transfer_features(m, {"x1", "g"}, tgt);
    const auto names = transferred_columns(m, {"x1", "g"});
    CHECK(names == std::vector<std::string>{"src.f_s(x1):g=p", "src.f_s(x1):g=q", "src.f_g"});
    for (const auto& name : tgt.column_names()) {
        const auto a = tgt.values(name), b = out.values(name);
        CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
    const auto effects = gam::extract_effects(m, {"s(x1):g"});
    for (std::size_t e = 0; e < effects.size(); ++e) {
        const auto expect = effects[e].evaluate(tgt);
        const auto got = out.values(names[e]);
        for (std::size_t r = 0; r < tgt.size(); ++r) REQUIRE(got[r] == doctest::Approx(expect[r]).epsilon(1e-14));
    }
    // lin(x2) needs x2, which is not shared
    CHECK_FALSE(out.has("src.f_x2"));

    CHECK_THROWS_AS(transfer_features(m, {"x3"}, tgt), DataError);
    auto missing = tgt;
    missing.drop_column("x1");
    CHECK_THROWS_AS(transfer_features(m, {"x1"}, missing), DataError);
    // applying twice would overwrite
    CHECK_THROWS_AS(transfer_features(m, {"x1", "g"}, out), DataError);
}

TEST_CASE("tensor effects evaluate on the covariate pair") {
    const auto src = covariate_frame(500, 4, 0.05, true);
    const auto m = gam::fit("y ~ te(x1, x2) + cat(g)", src);
    const auto tgt = covariate_frame(50, 5, 0.05, true);
    const auto out = transfer_features(m, {"x1", "x2"}, tgt);
    const auto col = out.values("src.f_te(x1:x2)");
    const auto effects = gam::extract_effects(m, {"te(x1:x2)"});
    const auto x1 = tgt.values("x1"), x2 = tgt.values("x2");
    for (std::size_t r = 0; r < tgt.size(); ++r) REQUIRE(col[r] == doctest::Approx(effects[0](x1[r], x2[r])));
}

TEST_CASE("residuals of an exact model vanish") {
    testing::Rng rng(7);
    const std::size_t n = 400;
    std::vector<double> x(n), y(n);
    std::vector<std::string> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = rng.uniform(-2, 2);
        g[i] = std::string(1, static_cast<char>('a' + rng.index(3)));
        y[i] = 1.0 + 3.0 * x[i] + (g[i] == "a" ? 0.5 : g[i] == "b" ? -1.0 : 0.25);
    }
    auto f = testing::frame_of(y);
    f.set_column("x", Column::numeric(x));
    f.set_column("g", Column::from_labels(g));
    const auto m = gam::fit("y ~ lin(x) + cat(g)", f);
    for (auto method : {ResidualMethod::BlockCv, ResidualMethod::OutOfSample}) {
        ResidualSpec spec;
        spec.method = method;
        for (double r : stacking_residuals(m, f, spec)) REQUIRE(std::abs(r) < 1e-6);
    }
}

TEST_CASE("two fold residuals come from the other fold") {
    const auto f = covariate_frame(400, 8, 0.2, false);
    const auto m = gam::fit("y ~ s(x1) + lin(x2) + cat(g)", f);
    ResidualSpec spec;
    spec.folds = 2;
    const auto res = stacking_residuals(m, f, spec);

    const auto first = range(0, 200), second = range(200, 400);
    const auto on_second = gam::fit(m.formula, f.select(second), frozen(m));
    const auto on_first = gam::fit(m.formula, f.select(first), frozen(m));
    const auto p1 = on_second.predict(f.select(first));
    const auto p2 = on_first.predict(f.select(second));
    for (std::size_t i = 0; i < 200; ++i) {
        REQUIRE(res[i] == doctest::Approx(f.target()[i] - p1[i]).epsilon(1e-9));
        REQUIRE(res[200 + i] == doctest::Approx(f.target()[200 + i] - p2[i]).epsilon(1e-9));
    }
}

TEST_CASE("unusable rows are skipped by block residuals") {
    auto f = covariate_frame(300, 9, 0.2, false);
    f.mark_unusable(0);
    f.mark_unusable(150);
    const auto m = gam::fit("y ~ s(x1) + lin(x2)", f);
    const auto res = stacking_residuals(m, f, {});
    CHECK(std::isnan(res[0]));
    CHECK(std::isnan(res[150]));
    CHECK(std::isfinite(res[1]));
}

TEST_CASE("online residuals match a refit on earlier days") {
    const auto f = covariate_frame(48 * 6, 10, 0.2, false);
    const auto m = gam::fit("y ~ s(x1) + lin(x2) + cat(g)", f);
    ResidualSpec spec;
    spec.method = ResidualMethod::Online;
    spec.online_start = f.timestamps()[48 * 3];
    const auto res = stacking_residuals(m, f, spec);
    for (std::size_t i = 0; i < 48 * 3; ++i) REQUIRE(std::isnan(res[i]));

    for (std::size_t day = 3; day < 6; ++day) {
        const auto before = gam::fit(m.formula, f.select(range(0, 48 * day)), frozen(m));
        const auto rows = range(48 * day, 48 * (day + 1));
        const auto p = before.predict(f.select(rows));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            REQUIRE(res[rows[i]] == doctest::Approx(f.target()[rows[i]] - p[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("residual configuration errors") {
    const auto f = covariate_frame(100, 11, 0.2, false);
    const auto m = gam::fit("y ~ s(x1) + lin(x2)", f);
    ResidualSpec online;
    online.method = ResidualMethod::Online;
    CHECK_THROWS_AS(stacking_residuals(m, f, online), ConfigError);
    ResidualSpec one;
    one.folds = 1;
    CHECK_THROWS_AS(stacking_residuals(m, f, one), ConfigError);
    ResidualSpec many;
    many.folds = 150;
    CHECK_THROWS_AS(stacking_residuals(m, f, many), DataError);
}

TEST_CASE("stacked model on a noiseless additive target stays on the GAM") {
    testing::Rng rng(12);
    const std::size_t n = 600;
    std::vector<double> x1(n), x2(n), y(n);
    std::vector<std::string> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        x1[i] = rng.uniform();
        x2[i] = rng.uniform(-1, 1);
        g[i] = rng.uniform() < 0.5 ? "p" : "q";
        // linear in x1: inside the unpenalized part of s(x1)
        y[i] = 3.0 + 2.0 * x1[i] - 0.5 * x2[i] + (g[i] == "p" ? 0.4 : -0.4);
    }
    auto f = testing::frame_of(y);
    f.set_column("x1", Column::numeric(x1));
    f.set_column("x2", Column::numeric(x2));
    f.set_column("g", Column::from_labels(g));

    StackedConfig cfg;
    cfg.covariates = {"x1", "x2"};
    cfg.forest = small_forest(50);
    const auto model = fit_stacked({}, gam::parse_formula("y ~ s(x1) + lin(x2) + cat(g)"), f, cfg);
    const auto c = model.correction(f);
    double cc = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        cc += c[i] * c[i];
        yy += y[i] * y[i];
    }
    CHECK(std::sqrt(cc) < 1e-3 * std::sqrt(yy));

    // exact decomposition
    const auto point = model.predict_point(f), base = model.predict_gam(f);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(point[i] == base[i] + c[i]);
    CHECK(model.forest_features ==
          std::vector<std::string>{"x1", "x2", "tgt.f_s(x1)", "tgt.f_x2", "tgt.f_g"});
}

TEST_CASE("stacking recovers an interaction the GAM cannot express") {
    const auto train = covariate_frame(1500, 13, 0.1, true);
    const auto test = covariate_frame(500, 14, 0.1, true);
    StackedConfig cfg;
    cfg.covariates = {"x1", "x2"};
    cfg.forest = small_forest(150);
    const auto model = fit_stacked({}, gam::parse_formula("y ~ s(x1) + s(x2) + cat(g)"), train, cfg);
    const auto gam_rmse = testing::rms(model.predict_gam(test), test.target());
    const auto stacked_rmse = testing::rms(model.predict_point(test), test.target());
    MESSAGE("gam " << gam_rmse << " stacked " << stacked_rmse);
    CHECK(stacked_rmse <= 0.8 * gam_rmse);

    const auto lo = model.predict_quantile(test, 0.1), hi = model.predict_quantile(test, 0.9);
    for (std::size_t i = 0; i < test.size(); ++i) REQUIRE(lo[i] <= hi[i]);
}

TEST_CASE("source effects feed the corrector") {
    const auto src = covariate_frame(800, 15, 0.1, false);
    const auto tgt = covariate_frame(400, 16, 0.1, true);
    const auto source = fit_source(gam::parse_formula("y ~ s(x1) + lin(x2) + cat(g)"), src, {"x1", "x2"});
    StackedConfig cfg;
    cfg.covariates = {"x1"};
    cfg.target_effects = false;
    cfg.forest = small_forest(40);
    const auto model = fit_stacked({source}, gam::parse_formula("y ~ s(x1) + cat(g)"), tgt, cfg);
    CHECK(model.forest_features == std::vector<std::string>{"x1", "src.f_s(x1)", "src.f_x2"});
    const auto aug = model.augment(tgt);
    CHECK(aug.has("src.f_s(x1)"));
    CHECK_FALSE(aug.has("tgt.f_s(x1)"));
}

namespace {

struct PanelFixture {
    std::map<std::string, SeriesFrame> zones;
    SeriesFrame global;
    PanelConfig config;
};

SeriesFrame panel_zone(std::size_t days, std::uint64_t seed, double level) {
    testing::Rng rng(seed);
    const std::size_t n = days * 48;
    std::vector<double> x1(n), x2(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x1[i] = rng.uniform();
        x2[i] = rng.uniform(-1, 1);
        y[i] = level + 0.3 * std::sin(2 * M_PI * x1[i]) + 0.2 * x2[i] + 0.15 * x1[i] * x2[i] + 0.03 * rng.normal();
    }
    auto f = testing::frame_of(y);
    f.set_column("x1", Column::numeric(x1));
    f.set_column("x2", Column::numeric(x2));
    return f;
}

PanelConfig panel_config(const SeriesFrame& f, std::size_t source_days, std::size_t trees) {
    PanelConfig c;
    c.formula = "y ~ s(x1) + lin(x2)";
    c.forest_covariates = {"x1", "x2"};
    c.forest = small_forest(trees);
    c.source_begin = f.timestamps().front();
    c.source_end = f.timestamps()[source_days * 48];
    c.target_begin = c.source_end;
    return c;
}

} // namespace

TEST_CASE("duplicated zone panel") {
    const auto global = panel_zone(26, 20, 1.0);
    const std::map<std::string, SeriesFrame> zones = {{"a", global}};
    const auto cfg = panel_config(global, 20, 60);
    PanelArtifacts art;
    const auto panel = build_expert_panel(zones, global, cfg, &art);

    CHECK(panel.zones == std::vector<std::string>{"a", "global"});
    CHECK(panel.experts.size() == 11);
    CHECK(panel.values.size() * panel.values[0].size() == 11 * 2);
    CHECK(panel.size() == 6 * 48);
    for (const auto& zone : panel.values) {
        for (const auto& stream : zone) REQUIRE(stream.size() == panel.size());
    }

    // forests appear on the second target day
    for (std::size_t i = 0; i < panel.size(); ++i) {
        REQUIRE(std::isnan(panel.stream("a", "ind.q0.5")[i]) == (i < 48));
        REQUIRE(std::isnan(panel.stream("global", "com.q0.5")[i]) == (i < 48));
        REQUIRE(std::isfinite(panel.stream("a", "gam")[i]));
    }

    double sq = 0.0;
    std::size_t m = 0;
    for (const auto& zone : panel.zones) {
        const auto& ind = panel.stream(zone, "ind.q0.5");
        const auto& com = panel.stream(zone, "com.q0.5");
        for (std::size_t i = 48; i < panel.size(); ++i) {
            sq += (ind[i] - com[i]) * (ind[i] - com[i]);
            ++m;
        }
    }
    MESSAGE("duplicated zone rms difference " << std::sqrt(sq / static_cast<double>(m)));
    CHECK(std::sqrt(sq / static_cast<double>(m)) < 0.05);

    for (std::size_t z = 0; z < panel.zones.size(); ++z) {
        for (const auto& stream : panel.values[z]) {
            for (double v : stream) {
                if (!std::isnan(v)) REQUIRE((v >= 0.0 && v <= panel.bound));
            }
        }
        for (const char* kind : {"ind", "com"}) {
            const std::string k(kind);
            const auto& lo = panel.stream(panel.zones[z], k + ".q0.05");
            const auto& mid = panel.stream(panel.zones[z], k + ".q0.5");
            const auto& hi = panel.stream(panel.zones[z], k + ".q0.95");
            for (std::size_t i = 48; i < panel.size(); ++i) REQUIRE((lo[i] <= mid[i] && mid[i] <= hi[i]));
        }
    }
    CHECK(art.forest_features == std::vector<std::string>{"x1", "x2", "src.f_s(x1)", "src.f_x2"});
    CHECK(art.refits == 3 * 5);
}

TEST_CASE("common forest draws rows from every zone") {
    const auto global = panel_zone(14, 30, 2.0);
    std::map<std::string, SeriesFrame> zones = {{"a", panel_zone(14, 31, 0.8)}, {"b", panel_zone(14, 32, 1.2)}};
    auto cfg = panel_config(global, 10, 30);
    cfg.min_forest_rows = 60;
    PanelArtifacts art;
    const auto panel = build_expert_panel(zones, global, cfg, &art);
    CHECK(panel.values.size() == 3);
    REQUIRE(art.common.has_value());

    // last fit used three days of each zone, stacked in zone order
    const std::size_t per_zone = 3 * 48;
    std::set<std::size_t> hit;
    for (const auto& tree : art.common->trees()) {
        for (auto row : tree.in_bag) hit.insert(row / per_zone);
    }
    CHECK(hit == std::set<std::size_t>{0, 1, 2});

    // with 60 rows needed, forests first exist on the third target day
    CHECK(std::isnan(panel.stream("a", "ind.q0.9")[48]));
    CHECK(std::isfinite(panel.stream("a", "ind.q0.9")[96]));
    CHECK(std::isfinite(panel.stream("b", "com.q0.9")[48]));
}

TEST_CASE("panel errors") {
    const auto global = panel_zone(12, 40, 1.0);
    auto cfg = panel_config(global, 10, 10);
    auto bad = global;
    bad.drop_column("x2");
    CHECK_THROWS_AS(build_expert_panel({{"a", bad}}, global, cfg), DataError);
    CHECK_THROWS_AS(build_expert_panel({{kGlobalZone, global}}, global, cfg), ConfigError);
    auto shifted = testing::frame_of(std::vector<double>(10, 1.0));
    CHECK_THROWS_AS(build_expert_panel({{"a", shifted}}, global, cfg), DataError);
    cfg.quantiles = {0.5, 1.0};
    CHECK_THROWS_AS(build_expert_panel({}, global, cfg), ConfigError);
}

TEST_CASE("panel csv round trip") {
    const auto global = panel_zone(12, 50, 1.0);
    const auto cfg = panel_config(global, 10, 10);
    const auto panel = build_expert_panel({{"a", panel_zone(12, 51, 0.5)}}, global, cfg);
    const auto path = (std::filesystem::temp_directory_path() / "hf_panel_test.csv").string();
    write_panel_csv(panel, path);
    const auto back = read_panel_csv(path);
    std::filesystem::remove(path);
    CHECK(back.zones == panel.zones);
    CHECK(back.experts == panel.experts);
    CHECK(back.timestamps == panel.timestamps);
    for (std::size_t z = 0; z < panel.zones.size(); ++z) {
        CHECK(back.outcomes[z] == panel.outcomes[z]);
        for (std::size_t e = 0; e < panel.experts.size(); ++e) {
            for (std::size_t i = 0; i < panel.size(); ++i) {
                const double a = panel.values[z][e][i], b = back.values[z][e][i];
                REQUIRE(((std::isnan(a) && std::isnan(b)) || a == b));
            }
        }
    }
}

TEST_CASE("stacked rows keep categorical labels") {
    auto a = testing::frame_of({1, 2});
    a.set_column("c", Column::from_labels({"u", "v"}));
    auto b = testing::frame_of({3});
    b.set_column("c", Column::from_labels({"w"}));
    const auto s = stack_rows({&a, &b}, {"c"}, "y");
    CHECK(s.size() == 3);
    CHECK(s.target() == std::vector<double>{1, 2, 3});
    CHECK(s.column("c").label(0) == "u");
    CHECK(s.column("c").label(2) == "w");
}
