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

#pragma once

#include "hierforecast/series.hpp"
#include "hierforecast/spline.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hierforecast::gam {

enum class TermKind {
    Categorical,    // cat(X)
    Linear,         // lin(X)
    LinearByFactor, // lin(X):cat(F)
    Smooth,         // s(X, k=.., [cyclic], [by=F])
    Tensor,         // te(X1, X2, k=k1, k2)
};

struct TermSpec {
    TermKind kind = TermKind::Linear;
    std::vector<std::string> covariates;
    std::vector<std::size_t> k;
    bool cyclic = false;
    double period = 0.0; // 0: inferred from the covariate name when cyclic
    std::string by;

    /// Stable name used for effect extraction and derived column names.
    std::string label() const;
    bool is_smooth() const noexcept { return kind == TermKind::Smooth || kind == TermKind::Tensor; }
    /// Every frame column the term reads.
    std::vector<std::string> inputs() const;
};

struct Formula {
    std::string response;
    std::vector<TermSpec> terms;
};

/// Grammar: `y ~ cat(X) + lin(X) + lin(X):cat(F) + s(X, k=20, cyclic, by=F) + te(X1, X2, k=5, 3)`.
/// `s(...)` also accepts `period=REAL`. Throws ConfigError on unknown tokens.
Formula parse_formula(const std::string& text);
std::string to_string(const Formula& formula);
std::string to_string(const TermSpec& term);

/// Smoothing-parameter selection.
struct LambdaPolicy {
    enum class Mode { Gcv, Fixed };
    Mode mode = Mode::Gcv;
    /// Lambda for every penalized term when mode == Fixed.
    double fixed = 1.0;
    /// Per-term lambdas (by label) that are never searched.
    std::map<std::string, double> overrides;
    /// GCV grid; one cyclic coordinate pass over terms.
    std::vector<double> grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4};

    static LambdaPolicy gcv() { return {}; }
    static LambdaPolicy fixed_value(double lambda) {
        LambdaPolicy p;
        p.mode = Mode::Fixed;
        p.fixed = lambda;
        return p;
    }
};

/// A fitted term with everything needed to evaluate it on new rows.
struct FittedTerm {
    TermSpec spec;
    /// Levels of the categorical covariate (Categorical) or of the factor
    /// (LinearByFactor, Smooth with `by`).
    std::vector<std::string> levels;
    std::vector<spline::BSplineBasis> bases;
    /// One coefficient block per copy: per level for Categorical (one value
    /// each, stored in block 0), per factor level for by-smooths and
    /// LinearByFactor, a single block otherwise.
    std::vector<std::vector<double>> coefficients;
    /// Training column means of linear terms (one per level for LinearByFactor).
    std::vector<double> centers;
    double lambda = 0.0;
    double penalty_scale = 1.0;
    double edf = 0.0;
    /// Training range of each covariate.
    std::vector<std::pair<double, double>> ranges;

    /// Contribution of this term to every row of the frame.
    std::vector<double> contribution(const SeriesFrame& frame) const;
    /// Evaluates the (copy `copy` of the) term at raw covariate values.
    double evaluate_at(std::span<const double> x, std::size_t copy = 0) const;
};

struct AdditiveModel {
    Formula formula;
    LambdaPolicy policy;
    double intercept = 0.0;
    std::vector<FittedTerm> terms;
    double sigma2 = 0.0;
    double edf = 0.0;   // includes the intercept
    double gcv = 0.0;
    double rss = 0.0;
    std::size_t n_obs = 0;
    std::vector<std::string> warnings;

    const FittedTerm& term(const std::string& label) const;
    std::vector<double> predict(const SeriesFrame& frame) const;
    /// Per-term contributions keyed by label (term order preserved by `terms`).
    std::vector<std::vector<double>> contributions(const SeriesFrame& frame) const;
};

/// Evaluable standalone effect of one fitted term (or of one factor level
/// of a by-smooth).
class EffectFunction {
public:
    EffectFunction(std::shared_ptr<const FittedTerm> term, std::optional<std::size_t> level);

    const std::string& name() const noexcept { return name_; }
    const FittedTerm& term() const noexcept { return *term_; }
    std::optional<std::size_t> level() const noexcept { return level_; }
    std::size_t arity() const noexcept { return term_->spec.kind == TermKind::Tensor ? 2 : 1; }

    /// Curve value at x (univariate effects). For categorical effects x is
    /// the level index; for by-level effects the level mask is not applied.
    double operator()(double x) const;
    double operator()(double x1, double x2) const;

    /// Row-wise contribution on a frame; by-level effects are zero on rows
    /// of other levels, so the effects of a model sum to its prediction.
    std::vector<double> evaluate(const SeriesFrame& frame) const;

private:
    std::shared_ptr<const FittedTerm> term_;
    std::optional<std::size_t> level_;
    std::string name_;
};

/// Design block and penalty of one term on training data (exposed for tests).
struct BasisBlock {
    Eigen::MatrixXd design;       // raw basis rows (uncentred)
    Eigen::MatrixXd penalty;      // per copy; empty for unpenalized terms
    std::vector<std::string> warnings;
};

BasisBlock build_basis(const TermSpec& spec, const SeriesFrame& frame, FittedTerm* out = nullptr);

AdditiveModel fit(const Formula& formula, const SeriesFrame& frame, const LambdaPolicy& policy = {});
inline AdditiveModel fit(const std::string& formula, const SeriesFrame& frame, const LambdaPolicy& policy = {}) {
    return fit(parse_formula(formula), frame, policy);
}

std::vector<double> predict(const AdditiveModel& model, const SeriesFrame& frame);

/// Effects for the given term labels (all terms when empty). By-factor
/// smooths expand to one effect per level.
std::vector<EffectFunction> extract_effects(const AdditiveModel& model, const std::vector<std::string>& labels = {});

/// Structured-text (JSON) model container.
void save_model(const AdditiveModel& model, const std::string& path);
AdditiveModel load_model(const std::string& path);
std::string serialize(const AdditiveModel& model);
AdditiveModel deserialize(const std::string& text);

/// A set of models keyed by the value of a partition column (e.g. one
/// model per half-hour), or a single model when the column is empty.
class PartitionedModel {
public:
    PartitionedModel() = default;
    static PartitionedModel fit(const Formula& formula, const SeriesFrame& frame, const std::string& partition_column,
                                const LambdaPolicy& policy = {});

    const std::string& partition_column() const noexcept { return column_; }
    const std::map<long, AdditiveModel>& models() const noexcept { return models_; }
    const AdditiveModel& model_for(long key) const;
    const Formula& formula() const;

    std::vector<double> predict(const SeriesFrame& frame) const;
    /// Per-term contributions (one column per effect name, by-levels expanded).
    std::map<std::string, std::vector<double>> effect_columns(const SeriesFrame& frame) const;

private:
    std::string column_;
    std::map<long, AdditiveModel> models_;
};

} // namespace hierforecast::gam
