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

#include "hierforecast/forest.hpp"

#include "hierforecast/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace hierforecast::forest {

std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, n);
    if (threads <= 1) {
        if (n) fn(0, n);
        return;
    }
    const std::size_t chunk = std::max<std::size_t>(1, n / (threads * 8));
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const std::size_t begin = next.fetch_add(chunk);
                if (begin >= n) return;
                try {
                    fn(begin, std::min(n, begin + chunk));
                } catch (...) {
                    std::lock_guard<std::mutex> lock(failure_mutex);
                    if (!failure) failure = std::current_exception();
                    next.store(n);
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

namespace {

constexpr std::size_t kMaxLevels = 64;
constexpr std::size_t kExhaustiveLevels = 5;

struct Split {
    double score = -std::numeric_limits<double>::infinity();
    std::int32_t feature = -1;
    double threshold = 0.0;
    std::uint64_t mask = 0;
};

class TreeBuilder {
public:
    TreeBuilder(const std::vector<double>& x, const std::vector<double>& y, std::size_t p,
                const std::vector<FeatureInfo>& features, const ForestConfig& config, std::uint64_t seed)
        : x_(x), y_(y), p_(p), features_(features), config_(config), rng_(seed) {}

    Tree build() {
        const std::size_t n = y_.size();
        const auto draws = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(config_.sample_fraction * n)));
        std::vector<std::uint32_t> sample(draws);
        for (auto& s : sample) s = static_cast<std::uint32_t>(rng_() % n);
        tree_.in_bag = sample;
        std::sort(tree_.in_bag.begin(), tree_.in_bag.end());
        tree_.in_bag.erase(std::unique(tree_.in_bag.begin(), tree_.in_bag.end()), tree_.in_bag.end());
        grow(std::move(sample), 0);
        return std::move(tree_);
    }

private:
    double xv(std::uint32_t row, std::size_t f) const { return x_[static_cast<std::size_t>(row) * p_ + f]; }

    std::int32_t make_leaf() {
        Node node;
        node.leaf = static_cast<std::int32_t>(tree_.leaf_rows.size());
        tree_.leaf_rows.emplace_back();
        tree_.nodes.push_back(node);
        return static_cast<std::int32_t>(tree_.nodes.size() - 1);
    }

    std::int32_t grow(std::vector<std::uint32_t> idx, std::size_t depth) {
        const std::size_t m = idx.size();
        const std::size_t min_node = std::max<std::size_t>(1, config_.min_node_size);
        if (m < 2 * min_node || (config_.max_depth && depth >= config_.max_depth)) return make_leaf();
        double sum = 0.0, sq = 0.0;
        for (auto r : idx) {
            sum += y_[r];
            sq += y_[r] * y_[r];
        }
        const double sse = sq - sum * sum / static_cast<double>(m);
        const double ymin = y_[*std::min_element(idx.begin(), idx.end(), [&](auto a, auto b) { return y_[a] < y_[b]; })];
        const double ymax = y_[*std::max_element(idx.begin(), idx.end(), [&](auto a, auto b) { return y_[a] < y_[b]; })];
        if (ymin == ymax) return make_leaf();

        // mtry features without replacement, visited in index order
        std::vector<std::size_t> order(p_);
        std::iota(order.begin(), order.end(), 0);
        const std::size_t mtry = config_.mtry;
        for (std::size_t i = 0; i < mtry; ++i) std::swap(order[i], order[i + rng_() % (p_ - i)]);
        order.resize(mtry);
        std::sort(order.begin(), order.end());

        Split best;
        for (std::size_t f : order) {
            if (features_[f].categorical()) {
                categorical_split(idx, f, min_node, best);
            } else {
                numeric_split(idx, f, min_node, best);
            }
        }
        const double parent = sum * sum / static_cast<double>(m);
        if (best.feature < 0 || !(best.score - parent > 1e-12 * std::max(sse, 1e-300))) return make_leaf();

        std::vector<std::uint32_t> left, right;
        for (auto r : idx) (goes_left(best, r) ? left : right).push_back(r);
        idx.clear();
        idx.shrink_to_fit();

        const auto self = static_cast<std::int32_t>(tree_.nodes.size());
        Node node;
        node.feature = best.feature;
        node.threshold = best.threshold;
        node.left_levels = best.mask;
        tree_.nodes.push_back(node);
        const std::int32_t l = grow(std::move(left), depth + 1);
        const std::int32_t r = grow(std::move(right), depth + 1);
        tree_.nodes[self].left = l;
        tree_.nodes[self].right = r;
        return self;
    }

    bool goes_left(const Split& s, std::uint32_t row) const {
        const double v = xv(row, static_cast<std::size_t>(s.feature));
        if (features_[s.feature].categorical()) return (s.mask >> static_cast<unsigned>(v)) & 1ULL;
        return v <= s.threshold;
    }

    void numeric_split(const std::vector<std::uint32_t>& idx, std::size_t f, std::size_t min_node, Split& best) {
        const std::size_t m = idx.size();
        pairs_.resize(m);
        for (std::size_t i = 0; i < m; ++i) pairs_[i] = {xv(idx[i], f), y_[idx[i]]};
        std::sort(pairs_.begin(), pairs_.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        if (pairs_.front().first == pairs_.back().first) return;
        double total = 0.0;
        for (const auto& pr : pairs_) total += pr.second;
        double left = 0.0;
        for (std::size_t i = 0; i + 1 < m; ++i) {
            left += pairs_[i].second;
            const std::size_t nl = i + 1, nr = m - nl;
            if (nl < min_node) continue;
            if (nr < min_node) break;
            if (pairs_[i].first == pairs_[i + 1].first) continue;
            const double right = total - left;
            const double score = left * left / static_cast<double>(nl) + right * right / static_cast<double>(nr);
            if (score > best.score) {
                double thr = 0.5 * (pairs_[i].first + pairs_[i + 1].first);
                if (!(thr < pairs_[i + 1].first)) thr = pairs_[i].first;
                best = {score, static_cast<std::int32_t>(f), thr, 0};
            }
        }
    }

    void categorical_split(const std::vector<std::uint32_t>& idx, std::size_t f, std::size_t min_node, Split& best) {
        const std::size_t levels = features_[f].levels.size();
        std::vector<double> sums(levels, 0.0);
        std::vector<std::size_t> counts(levels, 0);
        for (auto r : idx) {
            const auto l = static_cast<std::size_t>(xv(r, f));
            sums[l] += y_[r];
            counts[l] += 1;
        }
        std::vector<std::size_t> present;
        double total = 0.0;
        for (std::size_t l = 0; l < levels; ++l) {
            if (counts[l]) present.push_back(l);
            total += sums[l];
        }
        const std::size_t m = idx.size();
        const std::size_t L = present.size();
        if (L < 2) return;
        auto consider = [&](std::uint64_t mask) {
            double ls = 0.0;
            std::size_t ln = 0;
            for (std::size_t l = 0; l < levels; ++l) {
                if ((mask >> l) & 1ULL) {
                    ls += sums[l];
                    ln += counts[l];
                }
            }
            const std::size_t rn = m - ln;
            if (ln < min_node || rn < min_node) return;
            const double rs = total - ls;
            const double score = ls * ls / static_cast<double>(ln) + rs * rs / static_cast<double>(rn);
            if (score > best.score) best = {score, static_cast<std::int32_t>(f), 0.0, mask};
        };
        if (L <= kExhaustiveLevels) {
            // subsets of the present levels, the last one always on the right
            for (std::uint64_t bits = 1; bits < (1ULL << (L - 1)); ++bits) {
                std::uint64_t mask = 0;
                for (std::size_t i = 0; i + 1 < L; ++i) {
                    if ((bits >> i) & 1ULL) mask |= 1ULL << present[i];
                }
                consider(mask);
            }
            return;
        }
        std::vector<std::size_t> order = present;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return sums[a] / static_cast<double>(counts[a]) < sums[b] / static_cast<double>(counts[b]);
        });
        std::uint64_t mask = 0;
        for (std::size_t i = 0; i + 1 < L; ++i) {
            mask |= 1ULL << order[i];
            consider(mask);
        }
    }

    const std::vector<double>& x_;
    const std::vector<double>& y_;
    std::size_t p_;
    const std::vector<FeatureInfo>& features_;
    const ForestConfig& config_;
    std::mt19937_64 rng_;
    Tree tree_;
    std::vector<std::pair<double, double>> pairs_;
};

std::string row_label(const Column& col, std::size_t row) {
    if (col.categorical()) return col.label(row);
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.15g", col.values[row]);
    return buf;
}

std::vector<double> encode_frame(const SeriesFrame& frame, const std::vector<FeatureInfo>& features) {
    const std::size_t n = frame.size(), p = features.size();
    std::vector<double> x(n * p);
    for (std::size_t f = 0; f < p; ++f) {
        const auto& info = features[f];
        if (!frame.has(info.name) && info.name != frame.target_name()) {
            throw DataError("forest: missing feature column '" + info.name + "'");
        }
        if (info.categorical()) {
            const Column& col = frame.column(info.name);
            std::map<std::string, double> index;
            for (std::size_t l = 0; l < info.levels.size(); ++l) index[info.levels[l]] = static_cast<double>(l);
            std::vector<double> lookup;
            if (col.categorical()) {
                lookup.resize(col.levels.size(), -1.0);
                for (std::size_t l = 0; l < col.levels.size(); ++l) {
                    const auto it = index.find(col.levels[l]);
                    if (it != index.end()) lookup[l] = it->second;
                }
            }
            for (std::size_t r = 0; r < n; ++r) {
                double code = -1.0;
                if (col.categorical()) {
                    code = lookup[static_cast<std::size_t>(col.values[r])];
                } else {
                    char buf[40];
                    std::snprintf(buf, sizeof buf, "%.15g", col.values[r]);
                    const auto it = index.find(buf);
                    if (it != index.end()) code = it->second;
                }
                if (code < 0.0) {
                    throw DataError("forest: unseen level '" + row_label(col, r) + "' for feature '" + info.name + "'");
                }
                x[r * p + f] = code;
            }
        } else {
            if (frame.has(info.name) && frame.column(info.name).categorical()) {
                throw DataError("forest: feature '" + info.name + "' was numeric at fit but is categorical now");
            }
            const auto v = frame.values(info.name);
            for (std::size_t r = 0; r < n; ++r) x[r * p + f] = v[r];
        }
    }
    return x;
}

} // namespace

std::vector<std::string> QuantileForest::feature_names() const {
    std::vector<std::string> out;
    for (const auto& f : features_) out.push_back(f.name);
    return out;
}

std::vector<double> QuantileForest::encode(const SeriesFrame& frame) const { return encode_frame(frame, features_); }

std::size_t QuantileForest::leaf_of(const Tree& tree, std::span<const double> x) const {
    std::int32_t node = 0;
    for (;;) {
        const Node& nd = tree.nodes[static_cast<std::size_t>(node)];
        if (nd.feature < 0) return static_cast<std::size_t>(nd.leaf);
        const double v = x[static_cast<std::size_t>(nd.feature)];
        bool left;
        if (features_[static_cast<std::size_t>(nd.feature)].categorical()) {
            left = (nd.left_levels >> static_cast<unsigned>(v)) & 1ULL;
        } else {
            left = v <= nd.threshold;
        }
        node = left ? nd.left : nd.right;
    }
}

double QuantileForest::mean_of(std::span<const double> x) const {
    for (double v : x) {
        if (std::isnan(v)) return std::numeric_limits<double>::quiet_NaN();
    }
    double total = 0.0;
    for (const auto& tree : trees_) total += tree.leaf_mean[leaf_of(tree, x)];
    return total / static_cast<double>(trees_.size());
}

void QuantileForest::quantiles_of(std::span<const double> x, std::span<const double> qs, std::span<double> out) const {
    for (double v : x) {
        if (std::isnan(v)) {
            std::fill(out.begin(), out.end(), std::numeric_limits<double>::quiet_NaN());
            return;
        }
    }
    std::vector<std::pair<double, double>> mass;
    const double inv_trees = 1.0 / static_cast<double>(trees_.size());
    for (const auto& tree : trees_) {
        const auto& rows = tree.leaf_rows[leaf_of(tree, x)];
        const double w = inv_trees / static_cast<double>(rows.size());
        for (auto r : rows) mass.emplace_back(y_[r], w);
    }
    std::sort(mass.begin(), mass.end());
    for (std::size_t k = 0; k < qs.size(); ++k) {
        double cum = 0.0;
        out[k] = mass.back().first;
        for (const auto& [value, w] : mass) {
            cum += w;
            if (cum >= qs[k] - 1e-12) {
                out[k] = value;
                break;
            }
        }
    }
}

std::vector<double> QuantileForest::predict_mean(const SeriesFrame& frame) const {
    const auto x = encode(frame);
    const std::size_t n = frame.size(), p = features_.size();
    std::vector<double> out(n);
    parallel_for(n, config_.threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t r = b; r < e; ++r) out[r] = mean_of(std::span<const double>(x.data() + r * p, p));
    });
    return out;
}

std::vector<std::vector<double>> QuantileForest::predict_quantiles(const SeriesFrame& frame,
                                                                   std::span<const double> qs) const {
    for (double q : qs) {
        if (!(q > 0.0 && q < 1.0)) throw ConfigError("quantile level must lie in (0, 1), got " + std::to_string(q));
    }
    const auto x = encode(frame);
    const std::size_t n = frame.size(), p = features_.size();
    std::vector<std::vector<double>> out(qs.size(), std::vector<double>(n));
    parallel_for(n, config_.threads, [&](std::size_t b, std::size_t e) {
        std::vector<double> buf(qs.size());
        for (std::size_t r = b; r < e; ++r) {
            quantiles_of(std::span<const double>(x.data() + r * p, p), qs, buf);
            for (std::size_t k = 0; k < qs.size(); ++k) out[k][r] = buf[k];
        }
    });
    return out;
}

std::vector<double> QuantileForest::predict_quantile(const SeriesFrame& frame, double q) const {
    const double qs[1] = {q};
    return std::move(predict_quantiles(frame, qs)[0]);
}

std::vector<std::pair<std::uint32_t, double>> QuantileForest::weights(std::span<const double> x) const {
    std::vector<std::pair<std::uint32_t, double>> w;
    const double inv_trees = 1.0 / static_cast<double>(trees_.size());
    for (const auto& tree : trees_) {
        const auto& rows = tree.leaf_rows[leaf_of(tree, x)];
        for (auto r : rows) w.emplace_back(r, inv_trees / static_cast<double>(rows.size()));
    }
    std::sort(w.begin(), w.end());
    std::vector<std::pair<std::uint32_t, double>> merged;
    for (const auto& [r, v] : w) {
        if (!merged.empty() && merged.back().first == r) {
            merged.back().second += v;
        } else {
            merged.emplace_back(r, v);
        }
    }
    return merged;
}

QuantileForest fit_forest(const SeriesFrame& frame, const std::string& target, const std::vector<std::string>& features,
                          const ForestConfig& config) {
    if (features.empty()) throw ConfigError("forest: no features");
    if (config.n_trees < 1) throw ConfigError("forest: n_trees must be at least 1");
    if (!(config.sample_fraction > 0.0)) throw ConfigError("forest: sample_fraction must be positive");
    QuantileForest forest;
    forest.config_ = config;
    forest.target_ = target;
    const std::size_t p = features.size();
    if (forest.config_.mtry == 0) forest.config_.mtry = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p))));
    if (forest.config_.mtry > p) throw ConfigError("forest: mtry must lie in [1, p]");

    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < frame.size(); ++r) {
        if (frame.usable(r)) rows.push_back(r);
    }
    if (rows.size() < 2) throw DataError("forest: need at least 2 usable rows");
    const SeriesFrame train = rows.size() == frame.size() ? frame : frame.select(rows);

    for (const auto& name : features) {
        if (name == target) throw ConfigError("forest: target '" + target + "' listed as a feature");
        FeatureInfo info;
        info.name = name;
        const Column& col = train.column(name);
        if (col.categorical()) {
            if (col.levels.size() > kMaxLevels) {
                throw ConfigError("forest: categorical feature '" + name + "' has more than 64 levels");
            }
            info.levels = col.levels;
        }
        forest.features_.push_back(std::move(info));
    }
    const auto x = encode_frame(train, forest.features_);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i])) {
            throw DataError("forest: missing value in feature '" + features[i % p] + "' at " +
                            format_iso8601(train.timestamps()[i / p]));
        }
    }
    const auto yv = train.values(target);
    forest.y_.assign(yv.begin(), yv.end());
    for (std::size_t r = 0; r < forest.y_.size(); ++r) {
        if (!std::isfinite(forest.y_[r])) throw DataError("forest: missing target value at " + format_iso8601(train.timestamps()[r]));
    }
    forest.y_min_ = *std::min_element(forest.y_.begin(), forest.y_.end());
    forest.y_max_ = *std::max_element(forest.y_.begin(), forest.y_.end());

    forest.trees_.resize(config.n_trees);
    const std::size_t n = forest.y_.size();
    parallel_for(config.n_trees, config.threads, [&](std::size_t b, std::size_t e) {
        for (std::size_t t = b; t < e; ++t) {
            TreeBuilder builder(x, forest.y_, p, forest.features_, forest.config_, mix_seed(config.seed ^ t));
            Tree tree = builder.build();
            for (std::size_t r = 0; r < n; ++r) {
                tree.leaf_rows[forest.leaf_of(tree, std::span<const double>(x.data() + r * p, p))].push_back(
                    static_cast<std::uint32_t>(r));
            }
            tree.leaf_mean.resize(tree.leaf_rows.size());
            for (std::size_t l = 0; l < tree.leaf_rows.size(); ++l) {
                double s = 0.0;
                for (auto row : tree.leaf_rows[l]) s += forest.y_[row];
                tree.leaf_mean[l] = s / static_cast<double>(tree.leaf_rows[l].size());
            }
            forest.trees_[t] = std::move(tree);
        }
    });
    return forest;
}

// ---------------------------------------------------------------------------
// Importance

std::string Loss::name() const {
    if (kind == Kind::Squared) return "squared";
    char buf[40];
    std::snprintf(buf, sizeof buf, "pinball(%g)", q);
    return buf;
}

double Loss::operator()(double y, double prediction) const {
    const double e = y - prediction;
    if (kind == Kind::Squared) return e * e;
    return e >= 0.0 ? q * e : (q - 1.0) * e;
}

ImportanceReport permutation_importance(const QuantileForest& forest, const SeriesFrame& frame, const Loss& loss,
                                        std::uint64_t seed) {
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < frame.size(); ++r) {
        if (frame.usable(r)) rows.push_back(r);
    }
    if (rows.empty()) throw DataError("importance: evaluation frame has no usable rows");
    if (loss.kind == Loss::Kind::Pinball && !(loss.q > 0.0 && loss.q < 1.0)) {
        throw ConfigError("importance: pinball level must lie in (0, 1)");
    }
    const SeriesFrame eval = rows.size() == frame.size() ? frame : frame.select(rows);
    const std::size_t n = eval.size();
    const std::size_t p = forest.features().size();
    const auto y = eval.values(forest.target_name());
    const auto x = forest.encode(eval);

    auto mean_loss = [&](const std::vector<double>& xs) {
        std::vector<double> losses(n);
        parallel_for(n, forest.config().threads, [&](std::size_t b, std::size_t e) {
            const double qs[1] = {loss.q};
            double pred = 0.0;
            for (std::size_t r = b; r < e; ++r) {
                const std::span<const double> row(xs.data() + r * p, p);
                if (loss.kind == Loss::Kind::Squared) {
                    pred = forest.mean_of(row);
                } else {
                    forest.quantiles_of(row, qs, std::span<double>(&pred, 1));
                }
                losses[r] = loss(y[r], pred);
            }
        });
        return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(n);
    };

    ImportanceReport report;
    report.loss = loss;
    report.n_rows = n;
    report.window_begin = eval.timestamps().front();
    report.window_end = eval.timestamps().back();
    report.variables = forest.feature_names();
    report.baseline = mean_loss(x);
    report.raw.assign(p, 0.0);
    std::vector<double> permuted_x;
    for (std::size_t f = 0; f < p; ++f) {
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        std::mt19937_64 rng(mix_seed(seed ^ mix_seed(f + 1)));
        for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
        permuted_x = x;
        for (std::size_t r = 0; r < n; ++r) permuted_x[r * p + f] = x[perm[r] * p + f];
        report.raw[f] = mean_loss(permuted_x) - report.baseline;
    }
    std::vector<double> clipped(p);
    double total = 0.0;
    for (std::size_t f = 0; f < p; ++f) {
        clipped[f] = std::max(0.0, report.raw[f]);
        if (report.raw[f] < 0.0) report.clamped.push_back(report.variables[f]);
        total += clipped[f];
    }
    report.normalized.resize(p);
    for (std::size_t f = 0; f < p; ++f) {
        report.normalized[f] = total > 0.0 ? 100.0 * clipped[f] / total : 100.0 / static_cast<double>(p);
    }
    return report;
}

void write_importance_csv(const ImportanceReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write '" + path + "'");
    out << "variable,raw,normalized\n";
    char buf[96];
    for (std::size_t i = 0; i < report.variables.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", report.raw[i], report.normalized[i]);
        out << report.variables[i] << ',' << buf << '\n';
    }
}

// ---------------------------------------------------------------------------
// Serialization

std::string serialize(const QuantileForest& forest) {
    nlohmann::json j;
    j["format"] = "hierforecast.quantile-forest";
    j["version"] = 1;
    const auto& c = forest.config_;
    j["config"] = {{"n_trees", c.n_trees},           {"mtry", c.mtry},       {"min_node_size", c.min_node_size},
                   {"max_depth", c.max_depth},       {"sample_fraction", c.sample_fraction},
                   {"seed", c.seed},                 {"threads", c.threads}};
    nlohmann::json feats = nlohmann::json::array();
    for (const auto& f : forest.features_) feats.push_back({{"name", f.name}, {"levels", f.levels}});
    j["features"] = feats;
    j["target"] = forest.target_;
    j["y"] = forest.y_;
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : forest.trees_) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& nd : t.nodes) nodes.push_back({nd.feature, nd.threshold, nd.left_levels, nd.left, nd.right, nd.leaf});
        trees.push_back({{"nodes", nodes}, {"leaf_rows", t.leaf_rows}, {"in_bag", t.in_bag}});
    }
    j["trees"] = trees;
    return j.dump();
}

QuantileForest deserialize(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw DataError(std::string("forest container: ") + e.what());
    }
    if (j.value("format", "") != "hierforecast.quantile-forest") throw DataError("forest container: wrong format tag");
    QuantileForest f;
    const auto& c = j.at("config");
    f.config_.n_trees = c.at("n_trees");
    f.config_.mtry = c.at("mtry");
    f.config_.min_node_size = c.at("min_node_size");
    f.config_.max_depth = c.at("max_depth");
    f.config_.sample_fraction = c.at("sample_fraction");
    f.config_.seed = c.at("seed");
    f.config_.threads = c.at("threads");
    for (const auto& jf : j.at("features")) {
        f.features_.push_back({jf.at("name").get<std::string>(), jf.at("levels").get<std::vector<std::string>>()});
    }
    f.target_ = j.at("target").get<std::string>();
    f.y_ = j.at("y").get<std::vector<double>>();
    if (f.y_.empty()) throw DataError("forest container: no training targets");
    f.y_min_ = *std::min_element(f.y_.begin(), f.y_.end());
    f.y_max_ = *std::max_element(f.y_.begin(), f.y_.end());
    for (const auto& jt : j.at("trees")) {
        Tree t;
        for (const auto& jn : jt.at("nodes")) {
            Node nd;
            nd.feature = jn.at(0);
            nd.threshold = jn.at(1);
            nd.left_levels = jn.at(2);
            nd.left = jn.at(3);
            nd.right = jn.at(4);
            nd.leaf = jn.at(5);
            t.nodes.push_back(nd);
        }
        t.leaf_rows = jt.at("leaf_rows").get<std::vector<std::vector<std::uint32_t>>>();
        t.in_bag = jt.at("in_bag").get<std::vector<std::uint32_t>>();
        t.leaf_mean.resize(t.leaf_rows.size());
        for (std::size_t l = 0; l < t.leaf_rows.size(); ++l) {
            double s = 0.0;
            for (auto r : t.leaf_rows[l]) s += f.y_.at(r);
            t.leaf_mean[l] = s / static_cast<double>(t.leaf_rows[l].size());
        }
        f.trees_.push_back(std::move(t));
    }
    return f;
}

void save_forest(const QuantileForest& forest, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write forest to '" + path + "'");
    out << serialize(forest) << '\n';
}

QuantileForest load_forest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot read forest from '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return deserialize(ss.str());
}

} // namespace hierforecast::forest
