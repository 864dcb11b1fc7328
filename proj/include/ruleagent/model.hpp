#pragma once

#include "ruleagent/dataset.hpp"
#include "ruleagent/error.hpp"
#include "ruleagent/random.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ruleagent {

/// Row-major dense matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// GMF parameters: score(u, i) = sum_k head[k] * users(u, k) * items(i, k).
struct GmfParams {
    Matrix users;
    Matrix items;
    std::vector<double> head;
    std::uint64_t seed = 0;

    std::size_t dim() const noexcept { return head.size(); }

    friend bool operator==(const GmfParams&, const GmfParams&) = default;
};

/// Dense gradient with the shape of GmfParams.
struct GmfGradient {
    Matrix users;
    Matrix items;
    std::vector<double> head;

    static GmfGradient zeros_like(const GmfParams& p)
    {
        return {Matrix(p.users.rows(), p.users.cols()), Matrix(p.items.rows(), p.items.cols()),
                std::vector<double>(p.head.size(), 0.0)};
    }

    void clear()
    {
        std::fill(users.data().begin(), users.data().end(), 0.0);
        std::fill(items.data().begin(), items.data().end(), 0.0);
        std::fill(head.begin(), head.end(), 0.0);
    }
};

/// Xavier-uniform embeddings (fan_in = fan_out = dim), head set to ones.
inline GmfParams init_params(std::size_t num_users, std::size_t num_items, std::size_t dim, std::uint64_t seed)
{
    if (dim == 0) {
        throw InvalidArgument("init_params: dim must be positive");
    }
    const double bound = std::sqrt(6.0 / static_cast<double>(dim + dim));
    GmfParams p{Matrix(num_users, dim), Matrix(num_items, dim), std::vector<double>(dim, 1.0), seed};
    Rng rng(derive_seed(seed, 0x696e6974ULL));
    for (auto& v : p.users.data()) {
        v = uniform_real(rng, -bound, bound);
    }
    for (auto& v : p.items.data()) {
        v = uniform_real(rng, -bound, bound);
    }
    return p;
}

inline double score(const GmfParams& p, UserIndex u, ItemIndex i)
{
    if (u >= p.users.rows() || i >= p.items.rows()) {
        throw BoundsError("score: index out of range (user " + std::to_string(u) + ", item " + std::to_string(i) + ")");
    }
    const auto zu = p.users.row(u);
    const auto zi = p.items.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < zu.size(); ++k) {
        s += p.head[k] * zu[k] * zi[k];
    }
    return s;
}

/// log(sigmoid(x)) without overflow for large |x|.
inline double log_sigmoid(double x) noexcept
{
    return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) noexcept
{
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// -log sigmoid(f(u,i) - f(u,j)).
inline double bpr_loss(const GmfParams& p, UserIndex u, ItemIndex i, ItemIndex j)
{
    return -log_sigmoid(score(p, u, i) - score(p, u, j));
}

namespace detail {

inline void check_unit(double v, const char* name)
{
    if (!(v >= 0.0 && v <= 1.0)) {
        throw InvalidArgument(std::string("eraser term: ") + name + " must lie in [0, 1]");
    }
}

} // namespace detail

/// -log sigmoid(f(u,i) - alpha_t * w * f(u,n)) for a noisy positive n of u.
inline double eraser_term(const GmfParams& p, UserIndex u, ItemIndex i, ItemIndex n, double alpha_t, double w)
{
    detail::check_unit(alpha_t, "alpha_t");
    detail::check_unit(w, "w");
    return -log_sigmoid(score(p, u, i) - alpha_t * w * score(p, u, n));
}

struct Triple {
    UserIndex user = 0;
    ItemIndex pos = 0;
    ItemIndex other = 0; // sampled negative, or the noisy item of an eraser triple
};

namespace detail {

// Adds scale * d(-log sigmoid(f(u,i) - s * f(u,n)))/d(params) to `g`.
inline void accumulate_pair_grad(const GmfParams& p, UserIndex u, ItemIndex i, ItemIndex n, double s,
                                 double scale, GmfGradient& g)
{
    const double delta = score(p, u, i) - s * score(p, u, n);
    const double dl_ddelta = -sigmoid(-delta) * scale;
    const auto zu = p.users.row(u);
    const auto zi = p.items.row(i);
    const auto zn = p.items.row(n);
    auto gu = g.users.row(u);
    auto gi = g.items.row(i);
    auto gn = g.items.row(n);
    for (std::size_t k = 0; k < zu.size(); ++k) {
        const double h = p.head[k];
        gu[k] += dl_ddelta * h * (zi[k] - s * zn[k]);
        gi[k] += dl_ddelta * h * zu[k];
        gn[k] -= dl_ddelta * s * h * zu[k];
        g.head[k] += dl_ddelta * zu[k] * (zi[k] - s * zn[k]);
    }
}

} // namespace detail

inline void accumulate_bpr_grad(const GmfParams& p, const Triple& t, double scale, GmfGradient& g)
{
    detail::accumulate_pair_grad(p, t.user, t.pos, t.other, 1.0, scale, g);
}

inline void accumulate_eraser_grad(const GmfParams& p, const Triple& t, double alpha_t, double w, double scale,
                                   GmfGradient& g)
{
    detail::check_unit(alpha_t, "alpha_t");
    detail::check_unit(w, "w");
    detail::accumulate_pair_grad(p, t.user, t.pos, t.other, alpha_t * w, scale, g);
}

/// Gradient of bpr(clean) + alpha * eraser(eraser, alpha_t, w).
inline GmfGradient grad_combined(const GmfParams& p, const Triple& clean, const std::optional<Triple>& eraser,
                                 double alpha, double alpha_t, double w)
{
    if (alpha < 0.0) {
        throw InvalidArgument("grad_combined: alpha must be non-negative");
    }
    auto g = GmfGradient::zeros_like(p);
    accumulate_bpr_grad(p, clean, 1.0, g);
    if (eraser) {
        accumulate_eraser_grad(p, *eraser, alpha_t, w, alpha, g);
    }
    return g;
}

/// Loss whose gradient grad_combined returns.
inline double combined_loss(const GmfParams& p, const Triple& clean, const std::optional<Triple>& eraser,
                            double alpha, double alpha_t, double w)
{
    double l = bpr_loss(p, clean.user, clean.pos, clean.other);
    if (eraser) {
        l += alpha * eraser_term(p, eraser->user, eraser->pos, eraser->other, alpha_t, w);
    }
    return l;
}

struct AdamState {
    GmfGradient first;
    GmfGradient second;
    std::uint64_t step = 0;
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState for_params(const GmfParams& p, double learning_rate)
    {
        AdamState s{GmfGradient::zeros_like(p), GmfGradient::zeros_like(p)};
        s.learning_rate = learning_rate;
        return s;
    }
};

namespace detail {

inline void adam_update(std::vector<double>& x, std::vector<double>& m, std::vector<double>& v,
                        const std::vector<double>& g, const AdamState& s, double c1, double c2)
{
    for (std::size_t k = 0; k < x.size(); ++k) {
        m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
        v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
        const double m_hat = m[k] / c1;
        const double v_hat = v[k] / c2;
        x[k] -= s.learning_rate * m_hat / (std::sqrt(v_hat) + s.epsilon);
    }
}

inline bool all_finite(const std::vector<double>& xs)
{
    for (const double x : xs) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

} // namespace detail

/// One bias-corrected Adam update of every parameter.
inline void adam_step(GmfParams& p, AdamState& s, const GmfGradient& g)
{
    if (g.users.data().size() != p.users.data().size() || g.items.data().size() != p.items.data().size()
        || g.head.size() != p.head.size() || s.first.users.data().size() != p.users.data().size()
        || s.first.items.data().size() != p.items.data().size()) {
        throw InvalidArgument("adam_step: shape mismatch");
    }
    if (!detail::all_finite(g.users.data()) || !detail::all_finite(g.items.data()) || !detail::all_finite(g.head)) {
        throw NumericError("adam_step: non-finite gradient");
    }
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    detail::adam_update(p.users.data(), s.first.users.data(), s.second.users.data(), g.users.data(), s, c1, c2);
    detail::adam_update(p.items.data(), s.first.items.data(), s.second.items.data(), g.items.data(), s, c1, c2);
    detail::adam_update(p.head, s.first.head, s.second.head, g.head, s, c1, c2);
}

// Parameter file: a single JSON object
//   {"format": "ruleagent.gmf", "version": 1, "dim": d, "num_users": U,
//    "num_items": I, "seed": s, "user_embeddings": [[...] x U],
//    "item_embeddings": [[...] x I], "output_weights": [...]}
// Doubles are written in shortest round-trip form.
inline nlohmann::json params_json(const GmfParams& p)
{
    auto rows = [](const Matrix& m) {
        auto out = nlohmann::json::array();
        for (std::size_t r = 0; r < m.rows(); ++r) {
            const auto row = m.row(r);
            out.push_back(std::vector<double>(row.begin(), row.end()));
        }
        return out;
    };
    return {
        {"format", "ruleagent.gmf"},
        {"version", 1},
        {"dim", p.dim()},
        {"num_users", p.users.rows()},
        {"num_items", p.items.rows()},
        {"seed", p.seed},
        {"user_embeddings", rows(p.users)},
        {"item_embeddings", rows(p.items)},
        {"output_weights", p.head},
    };
}

inline GmfParams params_from_json(const nlohmann::json& j)
{
    try {
        if (j.at("format") != "ruleagent.gmf" || j.at("version") != 1) {
            throw LoadError("unsupported parameter file format");
        }
        const auto dim = j.at("dim").get<std::size_t>();
        auto read = [dim](const nlohmann::json& rows, std::size_t count) {
            Matrix m(count, dim);
            if (rows.size() != count) {
                throw LoadError("parameter file: row count mismatch");
            }
            for (std::size_t r = 0; r < count; ++r) {
                const auto v = rows[r].get<std::vector<double>>();
                if (v.size() != dim) {
                    throw LoadError("parameter file: row width mismatch");
                }
                std::copy(v.begin(), v.end(), m.row(r).begin());
            }
            return m;
        };
        GmfParams p;
        p.users = read(j.at("user_embeddings"), j.at("num_users").get<std::size_t>());
        p.items = read(j.at("item_embeddings"), j.at("num_items").get<std::size_t>());
        p.head = j.at("output_weights").get<std::vector<double>>();
        p.seed = j.at("seed").get<std::uint64_t>();
        if (p.head.size() != dim) {
            throw LoadError("parameter file: output weight size mismatch");
        }
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw LoadError(std::string("parameter file: ") + e.what());
    }
}

inline void save_params(const GmfParams& p, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) {
        throw Error("cannot write " + path.string());
    }
    out << params_json(p).dump() << '\n';
}

inline GmfParams load_params(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw LoadError("cannot open " + path.string());
    }
    try {
        return params_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw LoadError("parameter file " + path.string() + ": " + e.what());
    }
}

} // namespace ruleagent
