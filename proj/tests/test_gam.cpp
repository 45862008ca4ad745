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
#include "hierforecast/gam.hpp"
#include "hierforecast/spline.hpp"
#include "support.hpp"

#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <numeric>

using namespace hierforecast;
using namespace hierforecast::gam;

namespace {

std::vector<double> row_of(const spline::BSplineBasis& b, double x) {
    std::vector<double> r(b.size());
    b.evaluate(x, r);
    return r;
}

SeriesFrame sine_frame(std::size_t n, double sigma, std::uint64_t seed) {
    testing::Rng rng(seed);
    std::vector<double> x1(n), x2(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        x1[i] = rng.uniform();
        x2[i] = rng.uniform(-1, 1);
        y[i] = 2.0 + std::sin(2 * M_PI * x1[i]) + 0.5 * x2[i] + sigma * rng.normal();
    }
    auto f = testing::frame_of(y);
    f.set_column("x1", Column::numeric(x1));
    f.set_column("x2", Column::numeric(x2));
    return f;
}

// Richardson-extrapolated backward difference of f at x.
template <class F>
double left_slope(F f, double x, double h) {
    auto d = [&](double s) { return (f(x) - f(x - s)) / s; };
    auto d1 = [&](double s) { return 2.0 * d(s / 2) - d(s); };
    return (4.0 * d1(h / 2) - d1(h)) / 3.0;
}

} // namespace

TEST_CASE("B-spline rows sum to one everywhere") {
    testing::Rng rng(1);
    std::vector<double> xs(300);
    for (double& x : xs) x = rng.uniform(0, 10);
    const auto open = spline::BSplineBasis::open(0.0, 10.0, spline::quantile_knots(xs, 16));
    CHECK(open.size() == 20);
    for (int i = 0; i < 500; ++i) {
        const double x = rng.uniform(-3, 13);
        const auto r = row_of(open, x);
        REQUIRE(std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) < 1e-12);
    }
    const auto cyc = spline::BSplineBasis::periodic(0.0, 48.0, 20);
    for (int i = 0; i < 500; ++i) {
        const auto r = row_of(cyc, rng.uniform(-100, 100));
        REQUIRE(std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) < 1e-12);
    }
}

TEST_CASE("cyclic basis wraps at the period") {
    const auto cyc = spline::BSplineBasis::periodic(0.0, 48.0, 24);
    const auto a = row_of(cyc, 0.0);
    const auto b = row_of(cyc, 48.0);
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == doctest::Approx(b[j]).epsilon(1e-14));
    const auto c = row_of(cyc, 13.25);
    const auto d = row_of(cyc, 13.25 + 96.0);
    for (std::size_t j = 0; j < c.size(); ++j) CHECK(c[j] == doctest::Approx(d[j]).epsilon(1e-12));
}

TEST_CASE("penalty null space") {
    testing::Rng rng(2);
    std::vector<double> xs(500);
    for (double& x : xs) x = std::pow(rng.uniform(), 3.0) * 7.0; // skewed so knots are uneven
    const auto open = spline::BSplineBasis::open(0.0, 7.0, spline::quantile_knots(xs, 12));
    const auto g = open.greville();
    Eigen::VectorXd line(static_cast<Eigen::Index>(g.size()));
    for (std::size_t i = 0; i < g.size(); ++i) line(static_cast<Eigen::Index>(i)) = 1.5 - 0.75 * g[i];
    const Eigen::MatrixXd s = open.penalty();
    CHECK(line.dot(s * line) < 1e-20);
    // the Greville line reproduces the line in x
    for (double x : {0.1, 2.0, 6.9}) {
        const auto r = row_of(open, x);
        double v = 0.0;
        for (std::size_t j = 0; j < r.size(); ++j) v += r[j] * line(static_cast<Eigen::Index>(j));
        CHECK(v == doctest::Approx(1.5 - 0.75 * x).epsilon(1e-12));
    }
    const auto cyc = spline::BSplineBasis::periodic(0.0, 1.0, 12);
    const Eigen::VectorXd ones = Eigen::VectorXd::Ones(12);
    CHECK(ones.dot(cyc.penalty() * ones) < 1e-20);
}

TEST_CASE("formula grammar") {
    const auto f = parse_formula(
        "Load ~ cat(DayType) + lin(Temp) + lin(Temp):cat(DayType) + s(Instant, k=20, cyclic, by=DayType) + "
        "s(ToY, k=10, cyclic) + te(Instant, Temp, k=5, 3) + s(x, k=6, cyclic, period=7)");
    CHECK(f.response == "Load");
    REQUIRE(f.terms.size() == 7);
    CHECK(f.terms[0].label() == "DayType");
    CHECK(f.terms[1].label() == "Temp");
    CHECK(f.terms[2].label() == "Temp:DayType");
    CHECK(f.terms[3].label() == "s(Instant):DayType");
    CHECK(f.terms[3].cyclic);
    CHECK(f.terms[3].k[0] == 20);
    CHECK(f.terms[5].label() == "te(Instant:Temp)");
    CHECK(f.terms[5].k == std::vector<std::size_t>{5, 3});
    CHECK(f.terms[6].period == 7.0);
    CHECK(parse_formula(to_string(f)).terms.size() == 7);
    CHECK(to_string(parse_formula(to_string(f))) == to_string(f));

    CHECK_THROWS_AS(parse_formula("y ~ poly(x)"), ConfigError);
    CHECK_THROWS_AS(parse_formula("y ~ s(x, k=3x)"), ConfigError);
    CHECK_THROWS_AS(parse_formula("y ~ s(x, knots=4)"), ConfigError);
    CHECK_THROWS_AS(parse_formula("y = s(x)"), ConfigError);
    CHECK_THROWS_AS(parse_formula("y ~ s(x) + s(x)"), ConfigError);
    CHECK_THROWS_AS(parse_formula("y ~ lin(x):lin(z)"), ConfigError);
    CHECK(parse_formula("y ~ 1").terms.empty());
}

TEST_CASE("categorical model on balanced data gives centred group means") {
    testing::Rng rng(4);
    const std::size_t per = 30;
    std::vector<std::string> labels;
    std::vector<double> y;
    const double shifts[3] = {1.0, -2.0, 4.5};
    for (std::size_t g = 0; g < 3; ++g) {
        for (std::size_t i = 0; i < per; ++i) {
            labels.push_back(std::string(1, static_cast<char>('a' + g)));
            y.push_back(shifts[g] + rng.normal());
        }
    }
    auto frame = testing::frame_of(y);
    frame.set_column("G", Column::from_labels(labels));
    const auto model = fit("y ~ cat(G)", frame);
    const double grand = std::accumulate(y.begin(), y.end(), 0.0) / y.size();
    CHECK(model.intercept == doctest::Approx(grand).epsilon(1e-12));
    for (std::size_t g = 0; g < 3; ++g) {
        const double mean = std::accumulate(y.begin() + g * per, y.begin() + (g + 1) * per, 0.0) / per;
        CHECK(model.terms[0].coefficients[0][g] == doctest::Approx(mean - grand).epsilon(1e-10));
    }
}

TEST_CASE("smooth recovers a sine curve") {
    const auto frame = sine_frame(2000, 0.01, 7);
    const auto model = fit("y ~ s(x1, k=20) + lin(x2)", frame);
    const auto effects = extract_effects(model, {"s(x1)"});
    REQUIRE(effects.size() == 1);
    std::vector<double> est, truth;
    for (int i = 0; i < 100; ++i) {
        const double x = (i + 0.5) / 100.0;
        est.push_back(effects[0](x));
        truth.push_back(std::sin(2 * M_PI * x));
    }
    // the sine has zero mean on a uniform design, so no re-centring is needed
    CHECK(testing::rms(est, truth) < 0.05);
    CHECK(model.terms[1].coefficients[0][0] == doctest::Approx(0.5).epsilon(0.04));
    CHECK(model.sigma2 == doctest::Approx(1e-4).epsilon(0.3));
}

TEST_CASE("large lambda collapses a smooth to a line") {
    const auto frame = sine_frame(400, 0.1, 9);
    LambdaPolicy policy;
    policy.overrides["s(x1)"] = 1e10;
    const auto model = fit("y ~ s(x1, k=12)", frame, policy);
    const auto effect = extract_effects(model)[0];
    std::vector<double> v;
    for (int i = 0; i <= 100; ++i) v.push_back(effect(i / 100.0));
    double norm = 0.0;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) norm += std::pow(v[i + 1] - 2 * v[i] + v[i - 1], 2);
    CHECK(std::sqrt(norm) < 1e-6);
}

TEST_CASE("prediction reproduces fitted values and the centring invariant holds") {
    testing::Rng rng(12);
    const std::size_t n = 48 * 28;
    std::vector<double> y(n);
    auto frame = testing::frame_of(y);
    CalendarSpec cal;
    add_calendar(frame, cal);
    std::vector<double> temp(n);
    for (std::size_t i = 0; i < n; ++i) {
        temp[i] = 10 + 5 * std::sin(i / 100.0) + rng.normal();
        const double inst = frame.values("Instant")[i];
        const double day = frame.values("DayType")[i];
        y[i] = 5 + std::sin(2 * M_PI * inst / 48.0) * (1 + 0.1 * day) + 0.02 * temp[i] * temp[i] + 0.1 * rng.normal();
    }
    frame.set_target(y);
    frame.set_column("Temp", Column::numeric(temp));
    const auto model =
        fit("y ~ cat(DayType) + s(Instant, k=12, cyclic, by=DayType) + s(Temp, k=8)", frame);
    const auto pred = model.predict(frame);
    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i) rss += (y[i] - pred[i]) * (y[i] - pred[i]);
    CHECK(rss == doctest::Approx(model.rss).epsilon(1e-8));
    CHECK(model.sigma2 == doctest::Approx(model.rss / (n - model.edf)).epsilon(1e-12));

    for (const auto& c : model.contributions(frame)) {
        REQUIRE(std::abs(std::accumulate(c.begin(), c.end(), 0.0) / n) < 1e-8);
    }
    // by-level copies are centred within their level
    const auto effects = extract_effects(model, {"s(Instant):DayType"});
    CHECK(effects.size() == 7);
    for (const auto& e : effects) {
        const auto v = e.evaluate(frame);
        REQUIRE(std::abs(std::accumulate(v.begin(), v.end(), 0.0) / n) < 1e-8);
    }

    // decomposition into effects
    std::vector<double> total(n, model.intercept);
    for (const auto& e : extract_effects(model)) {
        const auto v = e.evaluate(frame);
        for (std::size_t i = 0; i < n; ++i) total[i] += v[i];
    }
    for (std::size_t i = 0; i < n; ++i) REQUIRE(std::abs(total[i] - pred[i]) < 1e-10);

    // effects evaluated on training rows match the internal contributions bit for bit
    const auto s_temp = extract_effects(model, {"s(Temp)"})[0];
    const auto contrib = model.term("s(Temp)").contribution(frame);
    for (std::size_t i = 0; i < n; ++i) REQUIRE(s_temp(temp[i]) == contrib[i]);

    CHECK_THROWS_AS(extract_effects(model, {"s(Nope)"}), DataError);
}

TEST_CASE("constant-only model") {
    auto frame = testing::frame_of({1.0, 2.0, 6.0});
    const auto model = fit("y ~ 1", frame);
    for (double v : model.predict(frame)) CHECK(v == doctest::Approx(3.0));
}

TEST_CASE("tangent extrapolation beyond the boundary knots") {
    const auto frame = sine_frame(600, 0.05, 13);
    const auto model = fit("y ~ s(x1, k=10)", frame);
    const auto f = extract_effects(model)[0];
    const double hi = model.terms[0].ranges[0].second;
    const double lo = model.terms[0].ranges[0].first;
    const double slope_hi = left_slope([&](double x) { return f(x); }, hi, 1e-2);
    const double slope_lo = -left_slope([&](double x) { return f(-x); }, -lo, 1e-2);
    for (double delta : {0.01, 0.1, 0.5}) {
        CHECK(std::abs(f(hi + delta) - (f(hi) + delta * slope_hi)) < 1e-8 * std::max(1.0, delta * 100));
        CHECK(std::abs(f(lo - delta) - (f(lo) - delta * slope_lo)) < 1e-8 * std::max(1.0, delta * 100));
    }
}

TEST_CASE("unpenalized fit equals ordinary least squares") {
    const auto frame = sine_frame(200, 0.2, 17);
    const auto model = fit("y ~ s(x1, k=8) + lin(x2)", frame, LambdaPolicy::fixed_value(0.0));

    // independent normal-equations oracle on [1, B(x1) without last column, x2]
    const auto& basis = model.terms[0].bases[0];
    const Eigen::Index n = 200, k = static_cast<Eigen::Index>(basis.size());
    Eigen::MatrixXd x(n, k + 1);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto r = row_of(basis, frame.values("x1")[i]);
        x(i, 0) = 1.0;
        for (Eigen::Index j = 0; j + 1 < k; ++j) x(i, j + 1) = r[j];
        x(i, k) = frame.values("x2")[i];
        y(i) = frame.target()[i];
    }
    const Eigen::VectorXd beta = (x.transpose() * x).ldlt().solve(x.transpose() * y);
    const Eigen::VectorXd oracle = x * beta;
    const auto pred = model.predict(frame);
    for (Eigen::Index i = 0; i < n; ++i) REQUIRE(std::abs(pred[i] - oracle(i)) < 1e-8);

    // residuals orthogonal to every design column
    const auto block = build_basis(model.terms[0].spec, frame);
    Eigen::VectorXd resid(n);
    for (Eigen::Index i = 0; i < n; ++i) resid(i) = y(i) - pred[i];
    const Eigen::VectorXd ortho = block.design.transpose() * resid;
    CHECK(ortho.cwiseAbs().maxCoeff() / (resid.norm() * std::sqrt(static_cast<double>(n))) < 1e-6);
}

TEST_CASE("GCV returns the grid minimum") {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto frame = sine_frame(150, 0.3, seed);
        const auto model = fit("y ~ s(x1, k=15)", frame);
        for (double g : LambdaPolicy{}.grid) {
            const auto alt = fit("y ~ s(x1, k=15)", frame, LambdaPolicy::fixed_value(g));
            REQUIRE(alt.gcv >= model.gcv);
        }
    }
}

TEST_CASE("effect of an irrelevant covariate is flat") {
    testing::Rng rng(23);
    auto frame = sine_frame(1000, 0.3, 23);
    std::vector<double> z(1000);
    for (double& v : z) v = rng.uniform(0, 5);
    frame.set_column("z", Column::numeric(z));
    const auto model = fit("y ~ s(x1, k=12) + s(z, k=12)", frame);
    const auto effect = extract_effects(model, {"s(z)"})[0];
    double mn = 1e300, mx = -1e300;
    for (int i = 0; i <= 100; ++i) {
        const double v = effect(5.0 * i / 100.0);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    CHECK(mx - mn < 3.0 * std::sqrt(model.sigma2));
}

TEST_CASE("tensor and by-factor linear terms") {
    testing::Rng rng(31);
    const std::size_t n = 1500;
    std::vector<double> a(n), b(n), c(n), y(n);
    std::vector<std::string> g(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = rng.uniform();
        b[i] = rng.uniform();
        c[i] = rng.uniform(-2, 2);
        g[i] = i % 2 ? "p" : "q";
        y[i] = 3 * a[i] * b[i] + (i % 2 ? 2.0 : -1.0) * c[i] + 0.01 * rng.normal();
    }
    auto frame = testing::frame_of(y);
    frame.set_column("a", Column::numeric(a));
    frame.set_column("b", Column::numeric(b));
    frame.set_column("c", Column::numeric(c));
    frame.set_column("g", Column::from_labels(g));
    const auto model = fit("y ~ te(a, b, k=5, 5) + lin(c):cat(g)", frame);
    const auto& by = model.term("c:g");
    CHECK(by.coefficients[0][0] == doctest::Approx(2.0).epsilon(0.01)); // level "p"
    CHECK(by.coefficients[1][0] == doctest::Approx(-1.0).epsilon(0.01));
    CHECK(std::sqrt(model.rss / n) < 0.02);
    const auto te = extract_effects(model, {"te(a:b)"})[0];
    CHECK(te.arity() == 2);
    // a product surface differs from its additive part by 3(a-1/2)(b-1/2)
    const double cross = te(0.9, 0.9) - te(0.9, 0.1) - te(0.1, 0.9) + te(0.1, 0.1);
    CHECK(cross == doctest::Approx(3 * 0.8 * 0.8).epsilon(0.05));
}

TEST_CASE("fit errors and warnings") {
    auto frame = sine_frame(300, 0.1, 41);
    frame.set_column("x3", frame.column("x1"));
    try {
        fit("y ~ s(x1, k=8) + s(x3, k=8)", frame);
        FAIL("expected a singular system");
    } catch (const NumericalError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("s(x1)") != std::string::npos);
        CHECK(msg.find("s(x3)") != std::string::npos);
    }
    frame.set_column("c", Column::numeric(std::vector<double>(300, 1.0)));
    CHECK_THROWS_AS(fit("y ~ s(c, k=8)", frame), NumericalError);
    CHECK_THROWS_AS(fit("y ~ s(missing, k=8)", frame), DataError);
    CHECK_THROWS_AS(fit("y ~ s(x1, k=8, cyclic)", frame), ConfigError);

    std::vector<double> few(300);
    for (std::size_t i = 0; i < 300; ++i) few[i] = static_cast<double>(i % 6);
    frame.set_column("few", Column::numeric(few));
    const auto model = fit("y ~ s(few, k=10)", frame);
    REQUIRE(model.warnings.size() == 1);
    CHECK(model.terms[0].spec.k[0] == 6);

    auto nan_frame = frame;
    auto x = std::vector<double>(frame.values("x1").begin(), frame.values("x1").end());
    x[5] = std::nan("");
    nan_frame.set_column("x1", Column::numeric(x));
    CHECK_THROWS_AS(fit("y ~ s(x1, k=8)", nan_frame), DataError);
    nan_frame.mark_unusable(5);
    CHECK_NOTHROW(fit("y ~ s(x1, k=8)", nan_frame));
}

TEST_CASE("unseen categorical level at prediction") {
    auto frame = testing::frame_of({1, 2, 3, 4, 5, 6});
    frame.set_column("G", Column::from_labels({"a", "b", "a", "b", "a", "b"}));
    const auto model = fit("y ~ cat(G)", frame);
    auto other = frame;
    other.set_column("G", Column::from_labels({"a", "b", "c", "b", "a", "b"}));
    CHECK_THROWS_AS(model.predict(other), DataError);
    auto missing = frame;
    missing.drop_column("G");
    CHECK_THROWS_AS(model.predict(missing), DataError);
}

TEST_CASE("serialization round trip and determinism") {
    const auto frame = sine_frame(500, 0.1, 51);
    const auto m1 = fit("y ~ s(x1, k=10) + lin(x2)", frame);
    const auto m2 = fit("y ~ s(x1, k=10) + lin(x2)", frame);
    CHECK(serialize(m1) == serialize(m2));
    const auto back = deserialize(serialize(m1));
    CHECK(back.predict(frame) == m1.predict(frame));
    CHECK(serialize(back) == serialize(m1));
    CHECK_THROWS_AS(deserialize("{}"), DataError);
}

TEST_CASE("partitioned model fits one model per key") {
    testing::Rng rng(61);
    const std::size_t n = 48 * 30;
    auto frame = testing::frame_of(std::vector<double>(n));
    add_calendar(frame, CalendarSpec{});
    std::vector<double> temp(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        temp[i] = rng.uniform(0, 20);
        const double inst = frame.values("Instant")[i];
        y[i] = inst + (inst < 24 ? 0.5 : -0.5) * temp[i] + 0.01 * rng.normal();
    }
    frame.set_target(y);
    frame.set_column("Temp", Column::numeric(temp));
    const auto pm = PartitionedModel::fit(parse_formula("y ~ lin(Temp)"), frame, "Instant");
    CHECK(pm.models().size() == 48);
    CHECK(pm.model_for(3).terms[0].coefficients[0][0] == doctest::Approx(0.5).epsilon(0.01));
    CHECK(pm.model_for(30).terms[0].coefficients[0][0] == doctest::Approx(-0.5).epsilon(0.01));
    const auto pred = pm.predict(frame);
    CHECK(testing::rms(pred, y) < 0.02);
    const auto cols = pm.effect_columns(frame);
    REQUIRE(cols.count("Temp") == 1);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& m = pm.model_for(static_cast<long>(frame.values("Instant")[i]));
        REQUIRE(std::abs(m.intercept + cols.at("Temp")[i] - pred[i]) < 1e-10);
    }
}
