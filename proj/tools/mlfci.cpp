// mlfci: forecast confidence intervals, uncertainty-averse portfolios and
// FDR selection from the command line. See README.md for the config keys.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mlfci/backtest.hpp"
#include "mlfci/bootstrap.hpp"
#include "mlfci/csv.hpp"
#include "mlfci/fourier.hpp"
#include "mlfci/json_io.hpp"
#include "mlfci/nn.hpp"
#include "mlfci/parallel.hpp"
#include "mlfci/portfolio.hpp"
#include "mlfci/selection.hpp"
#include "mlfci/simulate.hpp"

namespace fs = std::filesystem;
using namespace mlfci;
using io::json;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    unsigned threads = default_threads();
    std::string out_dir = ".";
    bool quiet = false;
};

// Seeds of the different consumers are derived from the one root seed.
enum SeedStream : std::uint64_t { kSimStream = 1, kTrainStream = 2, kBootStream = 3 };

json load_config(const Common& c) {
    if (c.config_path.empty()) return json::object();
    return io::read_json_file(c.config_path);
}

// File names inside a config are relative to the config's directory.
std::string from_config(const Common& c, const std::string& path) {
    if (path.empty() || fs::path(path).is_absolute() || c.config_path.empty()) return path;
    return (fs::path(c.config_path).parent_path() / path).lexically_normal().string();
}

std::uint64_t root_seed(const Common& c, io::ConfigReader& top) {
    const auto from_file = top.get<std::uint64_t>("seed", 0);
    return c.seed.value_or(from_file);
}

fs::path out_path(const Common& c, const std::string& name) {
    fs::create_directories(c.out_dir);
    return fs::path(c.out_dir) / name;
}

std::ofstream open_out(const Common& c, const std::string& name) {
    const auto p = out_path(c, name);
    std::ofstream out(p);
    if (!out) throw UsageError("cannot write '" + p.string() + "'");
    return out;
}

void note(const Common& c, const std::string& msg) {
    if (!c.quiet) std::cerr << msg << '\n';
}

std::string fmt(double v) { return csv::format(v); }

// Assets present in the panel's last month and their characteristics.
struct ForecastSet {
    std::vector<int> assets;
    Matrix features;
};

ForecastSet last_month_features(const backtest::MonthlyPanel& p) {
    ForecastSet f;
    const int m = p.n_months() - 1;
    for (int i = 0; i < p.n_assets(); ++i)
        if (p.present(m, i)) f.assets.push_back(i);
    f.features.resize(static_cast<Eigen::Index>(f.assets.size()), p.dim());
    for (std::size_t a = 0; a < f.assets.size(); ++a)
        f.features.row(static_cast<Eigen::Index>(a)) = p.chars[static_cast<std::size_t>(m)].row(f.assets[a]);
    return f;
}

Vector read_weights(const std::string& path, const backtest::MonthlyPanel& p, const ForecastSet& f) {
    const csv::Table t = csv::read_file(path);
    const int ci = t.column("asset_id"), cw = t.column("weight");
    if (ci < 0 || cw < 0) throw DataError("weights csv: need columns asset_id,weight");
    std::map<std::string, Eigen::Index> pos;
    for (std::size_t a = 0; a < f.assets.size(); ++a)
        pos[p.asset_ids[static_cast<std::size_t>(f.assets[a])]] = static_cast<Eigen::Index>(a);
    Vector w = Vector::Zero(static_cast<Eigen::Index>(f.assets.size()));
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const std::string& id = t.rows[r][static_cast<std::size_t>(ci)];
        const auto it = pos.find(id);
        if (it == pos.end())
            throw DataError("weights csv: asset '" + id + "' has no characteristics in the last panel month");
        const double v = csv::parse_number(t.rows[r][static_cast<std::size_t>(cw)], "line " + std::to_string(t.line_numbers[r]));
        if (std::isnan(v)) throw DataError("weights csv: missing weight for '" + id + "'");
        w(it->second) = v;
    }
    return w;
}

// ---------------------------------------------------------------------------

int cmd_simulate(const Common& c) {
    const json cfg = load_config(c);
    io::ConfigReader top(cfg, "");
    const std::uint64_t seed = root_seed(c, top);
    simulate::SimConfig sim_defaults;
    sim_defaults.N = 100;
    sim_defaults.T = 60;
    simulate::SimConfig sim = io::read_sim(top.object("sim"), sim_defaults);
    sim.seed = derive_seed(seed, kSimStream);
    const std::string mode = top.get<std::string>("mode", "coverage");

    simulate::CoverageConfig cc;
    cc.replications = top.get("replications", 50);
    cc.fourier_order = top.get("fourier_order", cc.fourier_order);
    cc.methods = {simulate::Method::Analytic, simulate::Method::TimeClustered, simulate::Method::CrossSectional,
                  simulate::Method::IID};
    if (top.has("methods")) {
        cc.methods.clear();
        for (const auto& m : top.require<std::vector<std::string>>("methods"))
            cc.methods.push_back(simulate::method_from_string(m));
    }
    nn::TrainConfig train_defaults;
    train_defaults.learning_rate = 0.01;
    train_defaults.epochs = 500;
    train_defaults.batch_size = std::numeric_limits<int>::max();
    cc.train = io::read_train(top.object("train"), train_defaults);
    cc.arch = io::read_architecture(top.object("arch"), cc.arch);
    cc.boot = io::read_bootstrap(top.object("bootstrap"), cc.boot);
    cc.threads = c.threads;
    top.finish();

    if (mode == "panel") {
        // Export one simulated panel in the standard CSV layouts.
        const simulate::SimPanel sp = simulate::simulate_panel(sim);
        auto month = [](int t) { return backtest::format_month(2000 * 12 + t); };
        auto out = open_out(c, "panel.csv");
        out << "asset_id,month,excess_return";
        for (int k = 0; k < sim.d; ++k) out << ",x" << k + 1;
        out << '\n';
        for (int t = 0; t <= sim.T; ++t) {
            for (int i = 0; i < sim.N; ++i) {
                // Row for month t carries characteristics x_t and the return
                // realised in month t (absent at t = 0).
                out << "a" << i + 1 << ',' << month(t) << ',';
                if (t > 0) out << fmt(sp.panel.returns()(static_cast<Eigen::Index>(t - 1) * sim.N + i));
                for (int k = 0; k < sim.d; ++k)
                    out << ',' << fmt(sp.characteristics[static_cast<std::size_t>(t)](i, k));
                out << '\n';
            }
        }
        auto wout = open_out(c, "weights.csv");
        wout << "asset_id,weight\n";
        for (int i = 0; i < sim.N; ++i) wout << "a" << i + 1 << ',' << fmt(1.0 / sim.N) << '\n';
        auto fout = open_out(c, "factors.csv");
        fout << "month,mkt_rf,smb,hml\n";
        for (int t = 1; t <= sim.T; ++t) {
            fout << month(t);
            for (int k = 0; k < 3; ++k) fout << ',' << fmt(sp.factors(t - 1, k));
            fout << '\n';
        }
        const Vector w = Vector::Constant(sim.N, 1.0 / sim.N);
        io::write_json_file(out_path(c, "truth.json").string(),
                            {{"seed", seed},
                             {"z_true", sp.true_forecast_target(w)},
                             {"true_expected_returns", io::to_json(sp.true_expected_returns)},
                             {"sigma", sp.sigma},
                             {"achieved_idio_share", sp.achieved_idio_share}});
        note(c, "wrote simulated panel to " + c.out_dir);
        return 0;
    }
    if (mode != "coverage") throw UsageError("config: mode must be \"coverage\" or \"panel\"");
    if (cc.replications < 50) throw UsageError("config: replications must be >= 50");

    const auto report = simulate::coverage_experiment(sim, cc, [&](int k) {
        if (!c.quiet && (k % 10 == 0 || k == cc.replications))
            std::cerr << "replication " << k << "/" << cc.replications << '\n';
    });

    json summaries = json::array();
    for (std::size_t m = 0; m < cc.methods.size(); ++m) {
        const auto& s = report.summaries[m];
        const std::string name = simulate::to_string(s.method);
        auto out = open_out(c, "tstats_" + name + ".csv");
        out << "replication,seed,truth,forecast,scale,t_stat,q_alpha\n";
        for (const auto& r : report.replications) {
            if (!r.error.empty()) continue;
            const double point = s.method == simulate::Method::Oracle ? r.fourier_forecast : r.nn_forecast;
            out << r.index << ',' << r.seed << ',' << fmt(r.truth) << ',' << fmt(point) << ',' << fmt(r.scale[m]) << ','
                << fmt(r.t_stat[m]) << ',' << fmt(r.q_alpha[m]) << '\n';
        }
        json js = {{"method", name},       {"n", s.n},
                   {"mean", s.mean},       {"sd", s.sd},
                   {"ks", s.ks},           {"coverage90", s.coverage90},
                   {"coverage95", s.coverage95}, {"coverage99", s.coverage99},
                   {"mean_scale", s.mean_scale}};
        if (!std::isnan(s.qalpha_coverage)) js["qalpha_coverage"] = s.qalpha_coverage;
        summaries.push_back(js);
    }
    json failures = json::array();
    for (const auto& r : report.replications)
        if (!r.error.empty()) failures.push_back({{"replication", r.index}, {"seed", r.seed}, {"error", r.error}});
    io::write_json_file(out_path(c, "coverage.json").string(),
                        {{"seed", seed},
                         {"N", sim.N},
                         {"T", sim.T},
                         {"d", sim.d},
                         {"replications", cc.replications},
                         {"forecast_error_sd", report.forecast_sd},
                         {"methods", summaries},
                         {"failures", failures}});
    auto txt = open_out(c, "summary.txt");
    char line[256];
    std::snprintf(line, sizeof line, "%-16s %5s %8s %8s %8s %8s %8s %8s\n", "method", "n", "mean", "sd", "ks",
                  "cov90", "cov95", "cov99");
    txt << line;
    for (const auto& s : report.summaries) {
        std::snprintf(line, sizeof line, "%-16s %5d %8.3f %8.3f %8.3f %8.3f %8.3f %8.3f\n",
                      simulate::to_string(s.method), s.n, s.mean, s.sd, s.ks, s.coverage90, s.coverage95,
                      s.coverage99);
        txt << line;
    }
    std::snprintf(line, sizeof line, "forecast error sd %.6g, failures %d\n", report.forecast_sd, report.failures);
    txt << line;
    if (!c.quiet) {
        std::ifstream back(out_path(c, "summary.txt"));
        std::cout << back.rdbuf();
    }
    return 0;
}

struct PanelJob {
    backtest::MonthlyPanel data;
    Panel train;
    nn::MlpArchitecture arch;
    nn::TrainConfig train_cfg;
};

PanelJob read_panel_job(io::ConfigReader& top, const Common& c, std::uint64_t seed, const std::string& panel_path) {
    PanelJob j;
    j.data = backtest::load_panel(panel_path);
    if (j.data.imputed_cells > 0)
        note(c, "panel: imputed " + std::to_string(j.data.imputed_cells) + " missing characteristic cells with 0.5");
    j.train = backtest::training_panel(j.data, 1, j.data.n_months());
    j.arch = io::read_architecture(top.object("arch"), nn::MlpArchitecture{});
    j.arch.input_dim = j.data.dim();
    j.train_cfg = io::read_train(top.object("train"), nn::TrainConfig{});
    j.train_cfg.seed = derive_seed(seed, kTrainStream);
    return j;
}

int cmd_train(const Common& c, const std::string& panel_flag) {
    const json cfg = load_config(c);
    io::ConfigReader top(cfg, "");
    const std::uint64_t seed = root_seed(c, top);
    const std::string panel = panel_flag.empty() ? from_config(c, top.require<std::string>("panel")) : (top.get<std::string>("panel", ""), panel_flag);
    PanelJob job = read_panel_job(top, c, seed, panel);
    top.finish();
    const nn::MlpModel model = nn::train(job.train, job.arch, job.train_cfg);
    io::write_json_file(out_path(c, "model.json").string(), io::model_to_json(model));
    auto out = open_out(c, "loss.csv");
    out << "epoch,loss\n";
    for (std::size_t e = 0; e < model.meta.epoch_loss.size(); ++e) out << e + 1 << ',' << fmt(model.meta.epoch_loss[e]) << '\n';
    note(c, "trained " + std::to_string(model.meta.epochs_run) + " epochs, in-sample MSE " + fmt(model.meta.final_mse));
    return 0;
}

int cmd_fci(const Common& c, const std::string& panel_flag, const std::string& weights_flag) {
    const json cfg = load_config(c);
    io::ConfigReader top(cfg, "");
    const std::uint64_t seed = root_seed(c, top);
    const std::string panel = panel_flag.empty() ? from_config(c, top.require<std::string>("panel")) : (top.get<std::string>("panel", ""), panel_flag);
    const std::string weights = weights_flag.empty() ? from_config(c, top.require<std::string>("weights")) : (top.get<std::string>("weights", ""), weights_flag);
    PanelJob job = read_panel_job(top, c, seed, panel);
    bootstrap::BootstrapConfig bc = io::read_bootstrap(top.object("bootstrap"), bootstrap::BootstrapConfig{});
    bc.seed = derive_seed(seed, kBootStream);
    bc.threads = c.threads;
    const int order = top.get("fourier_order", 3);
    const double level = top.get("level", 0.95);
    top.finish();
    if (!(level > 0.0 && level < 1.0)) throw UsageError("config: level must lie in (0,1)");
    bc.level = level;

    const ForecastSet fs = last_month_features(job.data);
    const Vector w = read_weights(weights, job.data, fs);
    const nn::MlpModel model = nn::train(job.train, job.arch, job.train_cfg);
    const double zhat = nn::predict(model, fs.features).dot(w);

    fourier::FourierBasis basis;
    basis.order = order;
    basis.input_dim = job.data.dim();
    const auto fit = fourier::fit_ols(job.train, basis);
    const auto se = fourier::analytic_se(fit, basis, w, fs.features);
    const auto boot = bootstrap::run(job.train, model, w, fs.features, job.train_cfg, bc);
    const double max_se = std::max(se.se, boot.sigma_star);
    const auto max_ci = fourier::fci(zhat, max_se, level);

    json out = {{"seed", seed},
                {"forecast_month", backtest::format_month(job.data.months.back() + 1)},
                {"n_assets", fs.assets.size()},
                {"point_forecast", zhat},
                {"fourier_forecast", fourier::predict(fit, basis, fs.features).dot(w)},
                {"train_mse", model.meta.final_mse},
                {"analytic", io::se_result_to_json(se, zhat, level)},
                {"bootstrap", io::bootstrap_result_to_json(boot, bc)},
                {"max_se", {{"se", max_se}, {"lower", max_ci.lower}, {"upper", max_ci.upper}}}};
    io::write_json_file(out_path(c, "forecast.json").string(), out);
    note(c, "forecast " + fmt(zhat) + ", analytic se " + fmt(se.se) + ", bootstrap sigma* " + fmt(boot.sigma_star));
    return 0;
}

std::vector<std::string> asset_labels(io::ConfigReader& top, Eigen::Index n) {
    std::vector<std::string> ids;
    if (top.has("asset_ids")) {
        ids = top.require<std::vector<std::string>>("asset_ids");
        if (static_cast<Eigen::Index>(ids.size()) != n) throw UsageError("config: asset_ids has the wrong length");
    } else {
        top.get<json>("asset_ids", json());
        for (Eigen::Index i = 0; i < n; ++i) ids.push_back(std::to_string(i + 1));
    }
    return ids;
}

int cmd_portfolio(const Common& c) {
    const json cfg = load_config(c);
    io::ConfigReader top(cfg, "");
    (void)root_seed(c, top);
    const std::string method = top.get<std::string>("method", "ua");
    const Vector z = io::vector_from_json(top.raw("z_hat"), "z_hat");
    const Matrix sigma = top.has("sigma") ? io::matrix_from_json(top.raw("sigma"), "sigma")
                                          : (top.get<json>("sigma", json()), Matrix());
    const double gamma = top.get("gamma", 1.0);
    const std::vector<std::string> ids = asset_labels(top, z.size());
    json out = {{"method", method}};

    Vector q = Vector::Zero(z.size());
    if (top.has("q_alpha")) {
        q = io::vector_from_json(top.raw("q_alpha"), "q_alpha");
        top.get<json>("se", json());
        top.get<json>("level", json());
        top.get<json>("bonferroni", json());
    } else if (top.has("se")) {
        const Vector se = io::vector_from_json(top.raw("se"), "se");
        if (se.size() != z.size()) throw UsageError("config: se has the wrong length");
        q = portfolio::confidence_to_q(se, top.get("level", 0.95), top.get("bonferroni", false));
    } else {
        top.get<json>("level", json());
        top.get<json>("bonferroni", json());
    }
    const bool budget = top.get("budget_constraint", false);
    io::ConfigReader rs = top.object("rs");
    Vector omega;
    if (method == "mv") {
        omega = budget ? portfolio::mv_budget_weights(z, sigma, gamma).omega : portfolio::mv_weights(z, sigma, gamma).omega;
    } else if (method == "gmvp") {
        omega = portfolio::gmvp(sigma);
    } else if (method == "ua") {
        const portfolio::UaProblem p{z, q, sigma, gamma, budget};
        const auto w = portfolio::ua_weights(p);
        omega = w.omega;
        out["objective"] = w.objective;
        out["kkt_residual"] = w.kkt_residual;
        out["iterations"] = w.iterations;
        out["multiplier"] = w.multiplier;
        out["q_alpha"] = io::to_json(q);
        if (z.size() == 1) out["soft_threshold"] = portfolio::soft_threshold_weight(z(0), q(0), sigma(0, 0), gamma);
    } else if (method == "two_asset") {
        const auto r = portfolio::two_asset_no_riskfree(z, q, sigma, gamma);
        omega = r.weights.omega;
        out["branch"] = portfolio::to_string(r.branch);
        out["c0"] = r.c0;
        out["w1_mv"] = r.w1_mv;
        out["objective"] = r.weights.objective;
        out["q_alpha"] = io::to_json(q);
    } else if (method == "rs") {
        portfolio::RsProblem p;
        p.z_hat = z;
        p.sigma = sigma;
        p.gamma = gamma;
        p.fse2 = io::matrix_from_json(rs.raw("fse2"), "rs.fse2");
        p.prior_mean = io::vector_from_json(rs.raw("prior_mean"), "rs.prior_mean");
        p.prior_scale = rs.get("g", 1.0);
        p.tau = rs.get("tau", 1.0);
        const auto r = portfolio::rs_weights(p);
        omega = r.weights.omega;
        out["z_tilde"] = io::to_json(r.z_tilde);
        out["W1"] = io::to_json(r.W1);
    } else {
        throw UsageError("config: method must be one of mv, gmvp, ua, two_asset, rs");
    }
    rs.finish();
    top.finish();
    out["omega"] = io::to_json(omega);
    out["asset_ids"] = ids;
    io::write_json_file(out_path(c, "portfolio.json").string(), out);
    auto csvout = open_out(c, "weights.csv");
    csvout << "asset_id,omega\n";
    for (Eigen::Index i = 0; i < omega.size(); ++i) csvout << ids[static_cast<std::size_t>(i)] << ',' << fmt(omega(i)) << '\n';
    return 0;
}

int cmd_select(const Common& c) {
    const json cfg = load_config(c);
    io::ConfigReader top(cfg, "");
    (void)root_seed(c, top);
    const std::string strategy = top.get<std::string>("strategy", "fci_fdr");
    const double alpha = top.get("alpha", 0.05);
    const int k = top.get("k", 50);
    const auto side = top.get("two_sided", false) ? selection::Side::TwoSided : selection::Side::OneSidedPositive;
    auto vec = [&](const char* key) { return top.has(key) ? io::vector_from_json(top.raw(key), key) : (top.get<json>(key, json()), Vector()); };
    const Vector z = vec("z_hat"), se = vec("se"), t_in = vec("t_stats"), p_in = vec("p_values");
    const Matrix history = top.has("history") ? io::matrix_from_json(top.raw("history"), "history")
                                              : (top.get<json>("history", json()), Matrix());
    selection::SelectionResult s;
    if (strategy == "bh") {
        if (p_in.size() > 0) {
            s = selection::bh_select(p_in, alpha);
            s.tests.p_values = p_in;
            s.tests.t_stats = Vector::Constant(p_in.size(), std::numeric_limits<double>::quiet_NaN());
        } else {
            if (t_in.size() == 0) throw UsageError("config: bh needs p_values or t_stats");
            s.tests = selection::make_tests(t_in, side);
            const auto tests = s.tests;
            s = selection::bh_select(tests.p_values, alpha);
            s.tests = tests;
        }
        s.weights = Vector::Zero(static_cast<Eigen::Index>(s.rejected.size()));
    } else if (strategy == "fci_fdr") {
        s = selection::strategy_fci_fdr(z, se, alpha, k, side);
    } else if (strategy == "highest_k") {
        s = selection::strategy_highest_k(z, k);
        s.tests.t_stats = Vector::Constant(z.size(), std::numeric_limits<double>::quiet_NaN());
        s.tests.p_values = s.tests.t_stats;
    } else if (strategy == "naive_fdr") {
        s = selection::strategy_naive_fdr(history, alpha, k, z, side);
    } else {
        throw UsageError("config: strategy must be one of bh, fci_fdr, highest_k, naive_fdr");
    }
    const auto n = static_cast<Eigen::Index>(s.rejected.size());
    const std::vector<std::string> ids = asset_labels(top, n);
    top.finish();
    std::vector<bool> chosen(static_cast<std::size_t>(n), false);
    for (int i : s.chosen) chosen[static_cast<std::size_t>(i)] = true;
    auto out = open_out(c, "selection.csv");
    out << "asset_id,t,p,rejected,chosen,weight\n";
    for (Eigen::Index i = 0; i < n; ++i)
        out << ids[static_cast<std::size_t>(i)] << ',' << fmt(s.tests.t_stats(i)) << ',' << fmt(s.tests.p_values(i)) << ','
            << (s.rejected[static_cast<std::size_t>(i)] ? 1 : 0) << ',' << (chosen[static_cast<std::size_t>(i)] ? 1 : 0)
            << ',' << fmt(s.weights(i)) << '\n';
    std::vector<std::string> chosen_ids;
    for (int i : s.chosen) chosen_ids.push_back(ids[static_cast<std::size_t>(i)]);
    io::write_json_file(out_path(c, "selection.json").string(),
                        {{"strategy", strategy}, {"alpha", alpha}, {"cutoff", s.cutoff}, {"k_bh", s.k_bh},
                         {"chosen", chosen_ids}});
    return 0;
}

json perf_to_json(const backtest::PerfStats& p) {
    auto num = [](double v) -> json {
        if (std::isnan(v)) return nullptr;
        if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
        return v;
    };
    return {{"ann_mean", num(p.ann_mean)},         {"ann_sd", num(p.ann_sd)},
            {"sharpe", num(p.sharpe)},             {"sortino", num(p.sortino)},
            {"max_drawdown", num(p.max_drawdown)}, {"best_month", num(p.best_month)},
            {"worst_month", num(p.worst_month)},   {"zero_min", num(p.zero_min)},
            {"zero_median", num(p.zero_median)},   {"zero_max", num(p.zero_max)}};
}

int cmd_backtest(const Common& c, const std::string& panel_flag) {
    const json cfg = load_config(c);
    io::ConfigReader top(cfg, "");
    const std::uint64_t seed = root_seed(c, top);
    const std::string panel = panel_flag.empty() ? from_config(c, top.require<std::string>("panel")) : (top.get<std::string>("panel", ""), panel_flag);
    const std::string factors = from_config(c, top.get<std::string>("factors", ""));
    const auto models = top.get<std::vector<std::string>>("factor_models", {});
    const backtest::MonthlyPanel data = backtest::load_panel(panel);
    const backtest::SplitPlan plan = io::read_plan(top.object("plan"));
    const backtest::StrategyConfig sc = io::read_strategy(top.object("strategy"));
    nn::MlpArchitecture arch = io::read_architecture(top.object("arch"), nn::MlpArchitecture{32, {32, 16, 8}});
    nn::TrainConfig tc = io::read_train(top.object("train"), nn::TrainConfig{});
    tc.seed = derive_seed(seed, kTrainStream);
    bootstrap::BootstrapConfig bc = io::read_bootstrap(top.object("bootstrap"), bootstrap::BootstrapConfig{});
    bc.seed = derive_seed(seed, kBootStream);
    bc.threads = c.threads;
    top.finish();

    const auto res = backtest::rolling_run(data, plan, sc, arch, tc, bc);
    for (const auto& w : res.warnings) note(c, "warning: " + w);
    if (res.months.size() < 2) throw DataError("backtest: fewer than 2 test months were traded");

    std::vector<int> month_codes;
    for (int m : res.months) month_codes.push_back(data.months[static_cast<std::size_t>(m)]);
    auto rout = open_out(c, "returns.csv");
    auto cout_ = open_out(c, "cumulative.csv");
    rout << "month";
    cout_ << "month";
    for (const auto& s : res.strategies) {
        rout << ',' << s;
        cout_ << ',' << s;
    }
    rout << '\n';
    cout_ << '\n';
    std::vector<double> wealth(res.strategies.size(), 1.0);
    for (std::size_t t = 0; t < res.months.size(); ++t) {
        rout << backtest::format_month(month_codes[t]);
        cout_ << backtest::format_month(month_codes[t]);
        for (std::size_t s = 0; s < res.strategies.size(); ++s) {
            const double r = res.returns(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s));
            wealth[s] *= 1.0 + r;
            rout << ',' << fmt(r);
            cout_ << ',' << fmt(wealth[s]);
        }
        rout << '\n';
        cout_ << '\n';
    }
    auto wout = open_out(c, "weights.csv");
    wout << "month,strategy,asset_id,weight\n";
    for (std::size_t t = 0; t < res.months.size(); ++t)
        for (std::size_t s = 0; s < res.strategies.size(); ++s) {
            const auto& h = res.holdings[t][s];
            for (std::size_t a = 0; a < h.assets.size(); ++a)
                wout << backtest::format_month(month_codes[t]) << ',' << res.strategies[s] << ','
                     << data.asset_ids[static_cast<std::size_t>(h.assets[a])] << ','
                     << fmt(h.weights(static_cast<Eigen::Index>(a))) << '\n';
        }
    auto dout = open_out(c, "decisions.csv");
    dout << "month,latest_data_month\n";
    for (const auto& d : res.decisions)
        dout << backtest::format_month(data.months[static_cast<std::size_t>(d.month)]) << ','
             << backtest::format_month(data.months[static_cast<std::size_t>(d.data_max)]) << '\n';
    auto tout = open_out(c, "retrains.csv");
    tout << "first_test_month,l2,validation_mse\n";
    for (const auto& r : res.retrains)
        tout << backtest::format_month(data.months[static_cast<std::size_t>(r.first_test_month)]) << ',' << fmt(r.l2)
             << ',' << fmt(r.validation_mse) << '\n';

    json perf = json::object();
    for (std::size_t s = 0; s < res.strategies.size(); ++s) {
        Vector zf;
        const std::string& name = res.strategies[s];
        if (name == "UA25" || name == "UA50" || name == "UA75")
            zf = res.zero_fraction.col(name == "UA25" ? 0 : name == "UA50" ? 1 : 2);
        perf[name] = perf_to_json(backtest::perf_stats(res.returns.col(static_cast<Eigen::Index>(s)), zf));
    }
    io::write_json_file(out_path(c, "perf.json").string(), perf);

    if (!factors.empty()) {
        const auto table = backtest::load_factors(factors);
        std::vector<std::string> use = models;
        if (use.empty())
            for (const auto& [name, cols] : backtest::factor_models()) {
                bool ok = true;
                for (const auto& col : cols) ok = ok && table.columns.count(col);
                if (ok) use.push_back(name);
            }
        json alpha = json::object();
        for (std::size_t s = 0; s < res.strategies.size(); ++s) {
            json rows = json::array();
            for (const auto& row : backtest::alpha_regressions(res.returns.col(static_cast<Eigen::Index>(s)),
                                                               month_codes, table, use))
                rows.push_back({{"model", row.model},
                                {"alpha_pct", std::isnan(row.alpha_pct) ? json(nullptr) : json(row.alpha_pct)},
                                {"t_stat", std::isfinite(row.t_stat) ? json(row.t_stat) : json(nullptr)},
                                {"stars", row.stars}});
            alpha[res.strategies[s]] = rows;
        }
        io::write_json_file(out_path(c, "alpha.json").string(), alpha);
    }
    note(c, "backtest: " + std::to_string(res.months.size()) + " test months, " +
                std::to_string(res.retrains.size()) + " retrainings");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Forecast confidence intervals for neural-network return forecasts"};
    app.require_subcommand(1);
    Common common;
    std::string panel, weights;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "JSON config file");
        sub->add_option("--seed", common.seed, "root seed for all randomness");
        sub->add_option("--threads", common.threads, "worker threads (output does not depend on it)")
            ->check(CLI::PositiveNumber);
        sub->add_option("--out-dir", common.out_dir, "output directory");
        sub->add_flag("--quiet", common.quiet, "no progress output");
    };
    auto* sim = app.add_subcommand("simulate", "Monte Carlo coverage experiment or simulated panel export");
    auto* train = app.add_subcommand("train", "train the network on a panel CSV");
    auto* fci = app.add_subcommand("fci", "forecast and confidence intervals for a weighted portfolio");
    auto* port = app.add_subcommand("portfolio", "MV / UA / two-asset / risk-sensitive weights");
    auto* sel = app.add_subcommand("select", "BH-FDR and long-only selection strategies");
    auto* bt = app.add_subcommand("backtest", "rolling-window backtest on a panel CSV");
    for (auto* s : {sim, train, fci, port, sel, bt}) add_common(s);
    for (auto* s : {train, fci, bt}) s->add_option("--panel", panel, "panel CSV (overrides config)");
    fci->add_option("--weights", weights, "weights CSV asset_id,weight (overrides config)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    try {
        if (*sim) return cmd_simulate(common);
        if (*train) return cmd_train(common, panel);
        if (*fci) return cmd_fci(common, panel, weights);
        if (*port) return cmd_portfolio(common);
        if (*sel) return cmd_select(common);
        if (*bt) return cmd_backtest(common, panel);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const json::exception& e) {
        std::cerr << "error: config: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
    return 2;
}
