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

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace hierforecast::forest {

struct ForestConfig {
    std::size_t n_trees = 500;
    std::size_t mtry = 0;          // 0: ceil(sqrt(p))
    std::size_t min_node_size = 5; // minimum rows in a child
    std::size_t max_depth = 0;     // 0: unlimited
    double sample_fraction = 1.0;  // bootstrap draws per tree, with replacement
    std::uint64_t seed = 1;
    std::size_t threads = 0;       // 0: hardware concurrency
};

struct FeatureInfo {
    std::string name;
    std::vector<std::string> levels; // empty for numeric features

    bool categorical() const noexcept { return !levels.empty(); }
};

struct Node {
    std::int32_t feature = -1; // -1 for leaves
    double threshold = 0.0;    // numeric: x <= threshold goes left
    std::uint64_t left_levels = 0; // categorical: bit l set -> level l goes left
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::int32_t leaf = -1;    // index into Tree::leaf_rows for leaves
};

struct Tree {
    std::vector<Node> nodes;
    /// Training rows routed to each leaf (every row lands in exactly one leaf).
    std::vector<std::vector<std::uint32_t>> leaf_rows;
    std::vector<double> leaf_mean;
    /// Distinct in-bag rows, ascending.
    std::vector<std::uint32_t> in_bag;
};

/// Bagged CART ensemble keeping leaf memberships for quantile readout.
class QuantileForest {
public:
    QuantileForest() = default;

    const ForestConfig& config() const noexcept { return config_; }
    const std::vector<FeatureInfo>& features() const noexcept { return features_; }
    std::vector<std::string> feature_names() const;
    const std::string& target_name() const noexcept { return target_; }
    const std::vector<double>& train_y() const noexcept { return y_; }
    const std::vector<Tree>& trees() const noexcept { return trees_; }
    double train_min() const noexcept { return y_min_; }
    double train_max() const noexcept { return y_max_; }

    /// Feature matrix (row-major, rows x p) in the forest's encoding.
    std::vector<double> encode(const SeriesFrame& frame) const;

    std::vector<double> predict_mean(const SeriesFrame& frame) const;
    std::vector<double> predict_quantile(const SeriesFrame& frame, double q) const;
    /// One vector per level, each over the frame rows.
    std::vector<std::vector<double>> predict_quantiles(const SeriesFrame& frame, std::span<const double> qs) const;
    /// Meinshausen weights of one encoded row: (training row, weight), sorted by row.
    std::vector<std::pair<std::uint32_t, double>> weights(std::span<const double> x) const;

    std::size_t leaf_of(const Tree& tree, std::span<const double> x) const;

    /// Readouts for one encoded row; NaN features give NaN predictions.
    double mean_of(std::span<const double> x) const;
    void quantiles_of(std::span<const double> x, std::span<const double> qs, std::span<double> out) const;

private:
    friend QuantileForest fit_forest(const SeriesFrame&, const std::string&, const std::vector<std::string>&,
                                     const ForestConfig&);
    friend std::string serialize(const QuantileForest&);
    friend QuantileForest deserialize(const std::string&);

    ForestConfig config_;
    std::vector<FeatureInfo> features_;
    std::string target_;
    std::vector<double> y_;
    double y_min_ = 0.0;
    double y_max_ = 0.0;
    std::vector<Tree> trees_;
};

/// Grows the forest on the usable rows of `frame`. `target` names the target
/// or any numeric column.
QuantileForest fit_forest(const SeriesFrame& frame, const std::string& target, const std::vector<std::string>& features,
                          const ForestConfig& config = {});

struct Loss {
    enum class Kind { Squared, Pinball };
    Kind kind = Kind::Squared;
    double q = 0.5;

    static Loss squared() { return {}; }
    static Loss pinball(double level) { return {Kind::Pinball, level}; }
    std::string name() const;
    double operator()(double y, double prediction) const;
};

struct ImportanceReport {
    std::vector<std::string> variables;
    std::vector<double> raw;        // permuted loss - baseline loss
    std::vector<double> normalized; // sums to 100
    std::vector<std::string> clamped; // variables whose raw value was negative
    Loss loss;
    double baseline = 0.0;
    std::size_t n_rows = 0;
    Timestamp window_begin = 0;
    Timestamp window_end = 0;
};

/// In-sample permutation importance on the usable rows of `frame`.
ImportanceReport permutation_importance(const QuantileForest& forest, const SeriesFrame& frame, const Loss& loss,
                                        std::uint64_t seed);
void write_importance_csv(const ImportanceReport& report, const std::string& path);

std::string serialize(const QuantileForest& forest);
QuantileForest deserialize(const std::string& text);
void save_forest(const QuantileForest& forest, const std::string& path);
QuantileForest load_forest(const std::string& path);

/// Runs fn(begin, end) over [0, n) split across up to `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn);

/// splitmix64 finalizer; used to derive per-tree and per-variable seeds.
std::uint64_t mix_seed(std::uint64_t x);

} // namespace hierforecast::forest
