#pragma once

// Command-line driver. Each subcommand reads its inputs, writes artifacts into
// --out and finishes with a manifest.json listing the artifacts and their hashes.
// Exit codes: 0 success, 2 input/validation error, 1 internal error.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ctxadjust/ctxadjust.hpp"

namespace ctxadjust::cli {

namespace fs = std::filesystem;

struct Common {
  std::string out = ".";
  unsigned threads = 0;
  std::optional<std::uint64_t> seed;
};

class Run {
 public:
  Run(std::string command, const Common& common) : command_(std::move(command)), common_(common) {
    fs::create_directories(common_.out);
    config_["command"] = command_;
    if (common_.seed) config_["seed"] = *common_.seed;
  }

  void option(const std::string& key, const json& value) { config_["options"][key] = value; }

  // Records an input file by content hash so the manifest pins it.
  void input(const std::string& key, const std::string& path) {
    if (!fs::exists(path)) throw InputError("input '" + path + "' does not exist");
    config_["inputs"][key] = {{"path", path}, {"sha256", fs::is_directory(path) ? "" : sha256_file(path)}};
  }

  template <typename F>
  void write(const std::string& name, F&& body) {
    const auto path = (fs::path(common_.out) / name).string();
    {
      std::ofstream out(path, std::ios::binary);
      if (!out) throw InputError("cannot write '" + path + "'");
      body(out);
    }
    artifacts_.push_back({{"path", name}, {"sha256", sha256_file(path)}});
  }

  void write_json(const std::string& name, const json& j) {
    write(name, [&](std::ostream& o) { o << j.dump(2) << '\n'; });
  }

  void finish() {
    json m;
    m["command"] = command_;
    m["config"] = config_;
    m["config_hash"] = sha256_hex(config_.dump());
    m["seed"] = common_.seed ? json(*common_.seed) : json(nullptr);
    m["artifacts"] = artifacts_;
    std::ofstream out(fs::path(common_.out) / "manifest.json", std::ios::binary);
    out << m.dump(2) << '\n';
  }

  unsigned threads() const { return resolve_threads(common_.threads); }
  std::uint64_t seed() const {
    if (!common_.seed) throw InputError(command_ + " is stochastic and needs --seed");
    return *common_.seed;
  }

 private:
  std::string command_;
  Common common_;
  json config_ = json::object();
  json artifacts_ = json::array();
};

inline json read_json(const std::string& path) {
  auto in = detail::open_input(path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline std::vector<MinuteObservation> read_minutes(const std::string& path) {
  auto table = parse_minute_csv(path);
  table.require_clean();
  if (table.rows.empty()) throw InputError("'" + path + "' has no minute rows");
  return std::move(table.rows);
}

inline ModelSpec load_spec(const std::string& path, const std::string& family, const std::string& stat) {
  ModelSpec spec = path.empty() ? baseline_spec() : model_spec_from_json(read_json(path));
  if (!family.empty()) spec.family = parse_family(family);
  if (!stat.empty()) spec.response = parse_stat(stat);
  return spec;
}

inline FittedGam load_model(const std::string& path) {
  try {
    return fitted_gam_from_json(read_json(path));
  } catch (const json::exception& e) {
    throw InputError("'" + path + "' is not a fitted model: " + e.what());
  }
}

// Restores in-memory fitted values for rows the model is applied to.
inline void attach_fitted_values(FittedGam& fit, const std::vector<MinuteObservation>& rows) {
  const auto p = predict(fit, rows);
  fit.mu = p.mu;
  fit.pi = p.pi;
}

inline json fit_summary(const FittedGam& fit) {
  return json{{"family", to_string(fit.family.kind)},
              {"theta", std::isfinite(fit.family.theta) ? json(fit.family.theta) : json(nullptr)},
              {"effectively_poisson", fit.effectively_poisson},
              {"edf_total", fit.edf_total},
              {"log_likelihood", fit.log_likelihood},
              {"aic", fit.aic},
              {"bic", fit.bic},
              {"iterations", fit.iterations},
              {"warnings", fit.warnings}};
}

inline void write_terms_csv(std::ostream& out, const FittedGam& fit) {
  out << "term,kind,columns,edf\n";
  for (const auto& t : fit.terms) {
    out << t.label << ',' << to_string(t.kind) << ',' << t.width << ',' << detail::format_double(t.edf) << '\n';
  }
}

// Fixture list in the results schema; goal columns may be left empty.
inline std::vector<GameDescriptor> read_fixtures(const std::string& path) {
  auto in = detail::open_input(path);
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty fixture file");
  detail::check_header(line, results_csv_columns());
  std::vector<GameDescriptor> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(detail::trim(line));
    if (f.size() != 8) throw RowError(lineno, "expected 8 fields");
    GameDescriptor g;
    g.game_id = std::string(detail::trim(f[0]));
    g.season = std::string(detail::trim(f[1]));
    g.league = std::string(detail::trim(f[2]));
    const auto round = detail::parse_int(f[3]);
    if (!round) throw RowError(lineno, "round must be an integer");
    g.round = static_cast<int>(*round);
    g.home_team = std::string(detail::trim(f[4]));
    g.away_team = std::string(detail::trim(f[5]));
    if (!detail::trim(f[6]).empty() || !detail::trim(f[7]).empty()) {
      const auto hg = detail::parse_int(f[6]), ag = detail::parse_int(f[7]);
      if (!hg || !ag) throw RowError(lineno, "goals must be integers or empty");
      g.home_goals = static_cast<int>(*hg);
      g.away_goals = static_cast<int>(*ag);
    }
    out.push_back(std::move(g));
  }
  return out;
}

inline Stat stat_or(const std::string& stat, const ModelSpec& spec) {
  return stat.empty() ? spec.response : parse_stat(stat);
}

inline std::vector<std::vector<MinuteObservation>> split_by_league_season(const std::vector<MinuteObservation>& rows) {
  std::vector<std::vector<MinuteObservation>> out;
  for (auto& [key, group] : split_league_season(rows)) out.push_back(std::move(group));
  return out;
}

inline std::vector<GameResult> results_for(const std::vector<GameResult>& all, const std::string& league,
                                           const std::string& season) {
  std::vector<GameResult> out;
  for (const auto& r : all)
    if (r.league == league && r.season == season) out.push_back(r);
  return out;
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"Game-context adjustment of soccer offensive statistics"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub, bool seeded) {
    sub->add_option("--out", common.out, "output directory")->capture_default_str();
    sub->add_option("--threads", common.threads, "worker threads (default: CTXADJUST_THREADS or 1)");
    if (seeded) sub->add_option("--seed", common.seed, "root seed for all random streams");
  };

  std::string families_arg = "all";
  std::string data, spec_path, family, stat, model, config, results, fixtures, commentary_dir, odds;
  int n_sim = 250;
  bool losocv_flag = false, interactions = false, game_effect = false;
  std::size_t min_bucket = 1000;

  auto* ingest = app.add_subcommand("ingest", "validate minute CSV or build it from commentary files");
  add_common(ingest, false);
  ingest->add_option("--data", data, "minute CSV to validate");
  ingest->add_option("--fixtures", fixtures, "fixture list (results schema, goals optional)");
  ingest->add_option("--commentary-dir", commentary_dir, "directory with <game_id>.txt commentary files");
  ingest->add_option("--odds", odds, "odds CSV (game_id,home_odds,draw_odds,away_odds)");

  auto* simulate = app.add_subcommand("simulate", "generate a synthetic league");
  add_common(simulate, true);
  simulate->add_option("--config", config, "generator config JSON");

  auto* fit = app.add_subcommand("fit", "fit a model");
  add_common(fit, false);
  fit->add_option("--data", data)->required();
  fit->add_option("--spec", spec_path, "model spec JSON (default: baseline)");
  fit->add_option("--family", family);
  fit->add_option("--stat", stat);

  auto* select = app.add_subcommand("select", "compare response families by AIC/BIC");
  add_common(select, false);
  select->add_option("--data", data)->required();
  select->add_option("--spec", spec_path);
  select->add_option("--family", families_arg, "all or a comma-separated list")->capture_default_str();
  select->add_option("--stat", stat);

  auto* diagnose = app.add_subcommand("diagnose", "simulated-residual tests, LOSOCV and calibration");
  add_common(diagnose, true);
  diagnose->add_option("--data", data)->required();
  diagnose->add_option("--model", model, "fitted model JSON (fitted here when absent)");
  diagnose->add_option("--spec", spec_path);
  diagnose->add_option("--family", family);
  diagnose->add_option("--stat", stat);
  diagnose->add_option("--n-sim", n_sim)->capture_default_str();
  diagnose->add_flag("--losocv", losocv_flag, "also run leave-one-season-out CV and calibration");
  diagnose->add_option("--min-bucket", min_bucket, "support threshold for the calibration slope")
      ->capture_default_str();

  auto* infer = app.add_subcommand("infer", "factor significance battery with Holm adjustment");
  add_common(infer, false);
  infer->add_option("--data", data)->required();
  infer->add_option("--spec", spec_path);
  infer->add_option("--family", family);
  infer->add_option("--stat", stat);
  infer->add_flag("--interactions", interactions, "also test the pairwise interactions");
  infer->add_flag("--game-effect", game_effect, "also test a per-game random effect");

  auto* adjust = app.add_subcommand("adjust", "adjust team-game statistics");
  add_common(adjust, false);
  adjust->add_option("--model", model)->required();
  adjust->add_option("--data", data)->required();
  adjust->add_option("--stat", stat, "shots or corners (default: the model response)");

  auto* report = app.add_subcommand("report", "fit, adjust and summarize seasons");
  add_common(report, false);
  report->add_option("--data", data)->required();
  report->add_option("--results", results)->required();
  report->add_option("--spec", spec_path);
  report->add_option("--family", family);
  report->add_option("--stat", stat, "shots or corners (default: the model response)");

  auto* forecast = app.add_subcommand("forecast-eval", "half-season forecasts from raw vs adjusted statistics");
  add_common(forecast, false);
  forecast->add_option("--data", data)->required();
  forecast->add_option("--results", results)->required();
  forecast->add_option("--model", model, "fitted model JSON (fitted here when absent)");
  forecast->add_option("--spec", spec_path);
  forecast->add_option("--family", family);
  forecast->add_option("--stat", stat, "shots or corners (default: the model response)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    Run run(sub->get_name(), common);
    const FitOptions opt;

    auto fit_or_load = [&](const std::vector<MinuteObservation>& rows) {
      if (!model.empty()) {
        run.input("model", model);
        return load_model(model);
      }
      if (!spec_path.empty()) run.input("spec", spec_path);
      const auto spec = load_spec(spec_path, family, stat);
      run.option("spec", to_json(spec));
      return fit_model(spec, rows, opt);
    };

    bool invalid_rows = false;
    if (sub == ingest) {
      std::vector<MinuteObservation> rows;
      std::vector<GameResult> res;
      json warnings = json::array();
      if (!data.empty()) {
        run.input("data", data);
        auto table = parse_minute_csv(data);
        run.write("issues.csv", [&](std::ostream& o) {
          o << "line,message\n";
          for (const auto& i : table.issues) o << i.line << ',' << i.message << '\n';
        });
        invalid_rows = !table.issues.empty();
        if (invalid_rows) {
          std::cerr << table.issues.size() << " invalid rows, first at line " << table.issues.front().line << ": "
                    << table.issues.front().message << '\n';
        }
        rows = std::move(table.rows);
      } else {
        if (fixtures.empty() || commentary_dir.empty() || odds.empty()) {
          throw InputError("ingest needs --data, or --fixtures with --commentary-dir and --odds");
        }
        run.input("fixtures", fixtures);
        run.input("commentary_dir", commentary_dir);
        run.input("odds", odds);
        auto odds_in = detail::open_input(odds);
        const auto odds_map = parse_odds_csv(odds_in);
        for (const auto& g : read_fixtures(fixtures)) {
          auto in = detail::open_input((fs::path(commentary_dir) / (g.game_id + ".txt")).string());
          const auto parsed = parse_commentary(in, g.home_team, g.away_team, g.game_id);
          for (const auto& w : parsed.warnings) warnings.push_back({{"game_id", g.game_id}, {"line", w.line}, {"text", w.text}});
          for (const auto& w : parsed.unattributed)
            warnings.push_back({{"game_id", g.game_id}, {"line", w.line}, {"text", "unattributed: " + w.text}});
          const auto it = odds_map.find(g.game_id);
          if (it == odds_map.end()) throw InputError("no odds for game " + g.game_id);
          auto minutes = events_to_minutes(parsed.events, it->second, g);
          rows.insert(rows.end(), minutes.begin(), minutes.end());
          res.push_back(game_result(parsed.events, g));
        }
        run.write("results.csv", [&](std::ostream& o) { write_results_csv(o, res); });
        run.write_json("ingest_warnings.json", warnings);
      }
      run.write("minutes.csv", [&](std::ostream& o) { write_minute_csv(o, rows); });
    } else if (sub == simulate) {
      GeneratorConfig cfg;
      if (!config.empty()) {
        run.input("config", config);
        cfg = generator_config_from_json(read_json(config));
      }
      cfg.seed = run.seed();
      run.option("generator", to_json(cfg));
      const auto league = simulate_league(cfg, run.threads());
      run.write("minutes.csv", [&](std::ostream& o) { write_minute_csv(o, league.rows); });
      run.write("truth.csv", [&](std::ostream& o) { write_truth_csv(o, league.true_eta); });
      run.write("results.csv", [&](std::ostream& o) { write_results_csv(o, league.results); });
      run.write("odds.csv", [&](std::ostream& o) { write_odds_csv(o, league.odds); });
    } else if (sub == fit) {
      run.input("data", data);
      const auto rows = read_minutes(data);
      const auto f = fit_or_load(rows);
      run.write_json("model.json", to_json(f));
      run.write_json("fit_summary.json", fit_summary(f));
      run.write("terms.csv", [&](std::ostream& o) { write_terms_csv(o, f); });
    } else if (sub == select) {
      run.input("data", data);
      if (!spec_path.empty()) run.input("spec", spec_path);
      const auto rows = read_minutes(data);
      std::vector<FamilyKind> families;
      if (families_arg == "all") {
        families = {FamilyKind::poisson, FamilyKind::negative_binomial, FamilyKind::zip, FamilyKind::gaussian_identity,
                    FamilyKind::gaussian_log};
      } else {
        std::stringstream ss(families_arg);
        for (std::string f; std::getline(ss, f, ',');) families.push_back(parse_family(f));
      }
      run.option("families", families_arg);
      auto spec = load_spec(spec_path, "", stat);
      const auto frame = make_covariate_frame(rows, spec.binning);
      const auto design = assemble_design(spec, frame);
      const auto y = response_vector(rows, spec.response);
      run.write("selection.csv", [&](std::ostream& o) {
        o << "family,log_likelihood,edf,aic,bic,theta,status\n";
        for (const auto k : families) {
          Family fam;
          fam.kind = k;
          try {
            const auto f = fit_family(design, y, fam, opt);
            o << to_string(k) << ',' << detail::format_double(f.log_likelihood) << ','
              << detail::format_double(effective_parameters(f)) << ',' << detail::format_double(f.aic) << ','
              << detail::format_double(f.bic) << ','
              << (k == FamilyKind::negative_binomial ? detail::format_double(f.family.theta) : "") << ",ok\n";
          } catch (const FitError& e) {
            o << to_string(k) << ",,,,,,failed: " << e.what() << '\n';
          }
        }
      });
    } else if (sub == diagnose) {
      run.input("data", data);
      run.option("n_sim", n_sim);
      const auto rows = read_minutes(data);
      auto f = fit_or_load(rows);
      attach_fitted_values(f, rows);
      const auto y = response_vector(rows, f.spec.response);
      const auto rep = ctxadjust::diagnose(f, y, n_sim, derive_seed(run.seed(), "diagnose"));
      for (const auto& w : rep.warnings) std::cerr << "warning: " << w << '\n';
      run.write_json("diagnostics.json", to_json(rep));
      if (losocv_flag) {
        run.option("min_bucket", min_bucket);
        const auto cv = losocv(rows, f.spec, opt, run.threads());
        run.write_json("losocv.json", to_json(cv));
        std::vector<Eigen::Index> ok;
        for (Eigen::Index i = 0; i < cv.predicted.size(); ++i)
          if (std::isfinite(cv.predicted(i))) ok.push_back(i);
        const Eigen::VectorXd pred = cv.predicted(ok), obs = cv.observed(ok);
        const auto curve = calibration_curve(pred, obs);
        run.write("calibration.csv", [&](std::ostream& o) { write_calibration_csv(o, curve); });
        try {
          std::cout << "calibration slope: " << calibration_slope(curve, min_bucket) << '\n';
        } catch (const PreconditionError& e) {
          std::cerr << "warning: " << e.what() << '\n';
        }
      }
    } else if (sub == infer) {
      run.input("data", data);
      if (!spec_path.empty()) run.input("spec", spec_path);
      const auto rows = read_minutes(data);
      const auto spec = load_spec(spec_path, family, stat);
      run.option("spec", to_json(spec));
      const auto battery = factor_battery(rows, spec, opt, run.threads());
      for (const auto& e : battery.failures) std::cerr << "failed: " << e << '\n';
      run.write("battery.csv", [&](std::ostream& o) { write_battery_csv(o, battery.tests); });
      if (interactions) {
        const auto base = spec.without_covariate("season");
        std::vector<TermTest> tests;
        for (const auto& group : split_by_league_season(rows)) {
          const auto base_fit = fit_model(base, group, opt);
          const auto pairs = interaction_pairs();
          std::vector<TermTest> local(pairs.size());
          parallel_for(pairs.size(), run.threads(), [&](std::size_t i) {
            local[i] = test_interaction(group, base, pairs[i].first, pairs[i].second, opt, &base_fit);
            local[i].league = group.front().league;
            local[i].season = group.front().season;
          });
          tests.insert(tests.end(), local.begin(), local.end());
        }
        holm_by_term(tests);
        run.write("interactions.csv", [&](std::ostream& o) {
          o << "league,season,term,stat,edf,raw_p,holm_p,delta_aic,delta_bic,failed\n";
          for (const auto& t : tests) {
            o << t.league << ',' << t.season << ',' << t.term << ',' << detail::format_double(t.statistic) << ','
              << detail::format_double(t.edf) << ',' << detail::format_double(t.raw_p) << ','
              << detail::format_double(t.holm_p) << ',' << detail::format_double(t.delta_aic) << ','
              << detail::format_double(t.delta_bic) << ',' << (t.failed ? 1 : 0) << '\n';
          }
        });
      }
      if (game_effect) {
        std::vector<TermTest> tests;
        for (const auto& group : split_by_league_season(rows)) {
          auto t = test_game_random_effect(group, spec, opt);
          t.league = group.front().league;
          t.season = group.front().season;
          tests.push_back(t);
        }
        holm_by_term(tests);
        run.write("game_effect.csv", [&](std::ostream& o) { write_battery_csv(o, tests); });
      }
    } else if (sub == adjust) {
      run.input("data", data);
      run.option("stat", stat);
      const auto rows = read_minutes(data);
      const auto f = fit_or_load(rows);
      const auto table = build_adjustment_table(f, f.spec.binning);
      run.write("adjustment_table.csv", [&](std::ostream& o) { write_adjustment_table_csv(o, table); });
      run.write("game_report.csv", [&](std::ostream& o) {
        write_game_report_csv(o, adjust_games(rows, table, stat_or(stat, f.spec)));
      });
    } else if (sub == report) {
      run.input("data", data);
      run.input("results", results);
      run.option("stat", stat);
      const auto rows = read_minutes(data);
      const auto all_results = parse_results_csv(results);
      const auto f = fit_or_load(rows);
      const auto table = build_adjustment_table(f, f.spec.binning);
      const auto s = stat_or(stat, f.spec);
      run.write_json("model.json", to_json(f));
      run.write("adjustment_table.csv", [&](std::ostream& o) { write_adjustment_table_csv(o, table); });
      run.write("game_report.csv", [&](std::ostream& o) { write_game_report_csv(o, adjust_games(rows, table, s)); });
      std::vector<SeasonReport> reports;
      for (const auto& group : split_by_league_season(rows)) {
        reports.push_back(season_report(group, results_for(all_results, group.front().league, group.front().season),
                                        table, s));
      }
      run.write("season_report.csv", [&](std::ostream& o) {
        for (std::size_t i = 0; i < reports.size(); ++i) {
          std::ostringstream part;
          write_season_report_csv(part, reports[i]);
          const auto text = part.str();
          o << (i == 0 ? text : text.substr(text.find('\n') + 1));
        }
      });
      json shifts = json::array();
      for (const auto& r : reports) {
        shifts.push_back({{"league", r.league},
                          {"season", r.season},
                          {"strongest_positive", r.strongest_positive},
                          {"strongest_negative", r.strongest_negative},
                          {"excluded", r.excluded}});
      }
      run.write_json("rank_shifts.json", shifts);
      if (reports.size() >= 2) {
        run.write("correlations.csv", [&](std::ostream& o) { write_correlation_csv(o, correlation_analysis(reports)); });
      }
    } else if (sub == forecast) {
      run.input("data", data);
      run.input("results", results);
      run.option("stat", stat);
      const auto rows = read_minutes(data);
      const auto all_results = parse_results_csv(results);
      const auto f = fit_or_load(rows);
      const auto table = build_adjustment_table(f, f.spec.binning);
      std::vector<ForecastEval> evals;
      for (const auto& group : split_by_league_season(rows)) {
        evals.push_back(evaluate_season(group, results_for(all_results, group.front().league, group.front().season),
                                        table, stat_or(stat, f.spec)));
      }
      run.write("forecast_eval.csv", [&](std::ostream& o) { write_forecast_csv(o, evals); });
      run.write_json("forecast_summary.json", to_json(summarize_forecasts(evals)));
    }
    run.finish();
    return invalid_rows ? 2 : 0;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace ctxadjust::cli
