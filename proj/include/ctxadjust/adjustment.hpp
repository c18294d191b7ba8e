#pragma once

// Multiplicative context coefficients and their use: projecting team-game
// output onto a tied, even-strength, home baseline, plus season reports,
// rankings and correlation summaries.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "ctxadjust/gam_fit.hpp"
#include "ctxadjust/stats.hpp"

namespace ctxadjust {

enum class ContextType { score_diff, red_card_diff, away };

inline std::string to_string(ContextType t) {
  switch (t) {
    case ContextType::score_diff: return "score_diff";
    case ContextType::red_card_diff: return "red_card_diff";
    case ContextType::away: return "away";
  }
  return "unknown";
}

struct AdjustmentEntry {
  ContextType type = ContextType::score_diff;
  int value = 0;
  double coef = 1.0;
  double ci_lo = 1.0;
  double ci_hi = 1.0;
  Eigen::VectorXd d;  // log coef = -dᵀβ over AdjustmentTable::columns (empty for injected tables)
};

struct AdjustmentTable {
  BinningPolicy policy;
  std::string source_hash;
  std::vector<AdjustmentEntry> score;     // -cap..cap
  std::vector<AdjustmentEntry> red_card;  // -cap..cap
  AdjustmentEntry away;
  // Relevant coefficient indices with their estimates and posterior covariance.
  std::vector<Eigen::Index> columns;
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov;

  const AdjustmentEntry& score_entry(int s) const {
    const int cap = policy.score_cap;
    return score[static_cast<std::size_t>(std::clamp(s, -cap, cap) + cap)];
  }
  const AdjustmentEntry& red_card_entry(int rc) const {
    const int cap = policy.red_card_cap;
    return red_card[static_cast<std::size_t>(std::clamp(rc, -cap, cap) + cap)];
  }
  double coefficient(int score_diff, int red_card_diff, bool home) const {
    return score_entry(score_diff).coef * red_card_entry(red_card_diff).coef * (home ? 1.0 : away.coef);
  }
  bool has_covariance() const { return cov.size() > 0; }
};

inline constexpr double kZ95 = 1.959963984540054;

namespace detail {

// Row of a single term's basis at one covariate value (all other covariates
// at neutral values; only the named covariate is read).
inline Eigen::RowVectorXd term_row(const TermBasis& basis, const std::string& covariate, double value) {
  CovariateFrame f(1);
  f.add_numeric(covariate, {value});
  if (!basis.spec.by.empty()) f.add_numeric(basis.spec.by, {basis.spec.by_level.value_or(0.0)});
  return evaluate_term(basis, f).row(0);
}

inline void set_interval(AdjustmentEntry& e, const AdjustmentTable& t) {
  const double log_coef = -e.d.dot(t.beta);
  e.coef = std::exp(log_coef);
  const double sd = std::sqrt(std::max(0.0, e.d.dot(t.cov * e.d)));
  e.ci_lo = std::exp(log_coef - kZ95 * sd);
  e.ci_hi = std::exp(log_coef + kZ95 * sd);
}

}  // namespace detail

// Coefficients e^{-(η̂_c - η̂_0)} for every binned score and red-card state
// and for away play, with 95% intervals from the posterior covariance.
inline AdjustmentTable build_adjustment_table(const FittedGam& fit, const BinningPolicy& policy) {
  policy.validate();
  if (fit.spec.has_interaction()) {
    throw PreconditionError("adjustment is undefined for models with interaction terms");
  }
  AdjustmentTable t;
  t.policy = policy;
  t.source_hash = fit.spec_hash;

  const TermBasis* score_basis = nullptr;
  const TermBasis* red_basis = nullptr;
  const TermBasis* home_basis = nullptr;
  const TermSummary *score_term = nullptr, *red_term = nullptr, *home_term = nullptr;
  for (std::size_t j = 0; j < fit.bases.size(); ++j) {
    const auto& spec = fit.bases[j].spec;
    if (!spec.by.empty()) continue;
    if (spec.covariate == "score_diff" && spec.kind != TermKind::tensor_interaction) {
      score_basis = &fit.bases[j], score_term = &fit.terms[j];
    } else if (spec.covariate == "red_card_diff" && spec.kind != TermKind::tensor_interaction) {
      red_basis = &fit.bases[j], red_term = &fit.terms[j];
    } else if (spec.covariate == "home" && spec.kind == TermKind::dummy) {
      home_basis = &fit.bases[j], home_term = &fit.terms[j];
    }
  }
  for (const auto* term : {score_term, red_term, home_term}) {
    if (!term) continue;
    for (Eigen::Index c = 0; c < term->width; ++c) t.columns.push_back(term->first_column + c);
  }
  const auto w = static_cast<Eigen::Index>(t.columns.size());
  t.beta.resize(w);
  t.cov.resize(w, w);
  for (Eigen::Index a = 0; a < w; ++a) {
    t.beta(a) = fit.beta(t.columns[static_cast<std::size_t>(a)]);
    for (Eigen::Index b = 0; b < w; ++b)
      t.cov(a, b) = fit.posterior_cov(t.columns[static_cast<std::size_t>(a)], t.columns[static_cast<std::size_t>(b)]);
  }
  auto local_offset = [&](const TermSummary* term) {
    Eigen::Index off = 0;
    for (const auto* other : {score_term, red_term, home_term}) {
      if (other == term) return off;
      if (other) off += other->width;
    }
    return off;
  };

  auto fill = [&](ContextType type, int cap, const TermBasis* basis, const TermSummary* term,
                  const std::string& covariate) {
    std::vector<AdjustmentEntry> out;
    Eigen::RowVectorXd base;
    if (basis) base = detail::term_row(*basis, covariate, 0.0);
    for (int v = -cap; v <= cap; ++v) {
      AdjustmentEntry e;
      e.type = type;
      e.value = v;
      e.d = Eigen::VectorXd::Zero(w);
      if (basis && v != 0) {
        e.d.segment(local_offset(term), term->width) = (detail::term_row(*basis, covariate, v) - base).transpose();
      }
      detail::set_interval(e, t);
      if (v == 0) e.coef = e.ci_lo = e.ci_hi = 1.0;
      out.push_back(std::move(e));
    }
    return out;
  };
  t.score = fill(ContextType::score_diff, policy.score_cap, score_basis, score_term, "score_diff");
  t.red_card = fill(ContextType::red_card_diff, policy.red_card_cap, red_basis, red_term, "red_card_diff");

  // Away rows differ from the home baseline by -γ̂ on the linear predictor,
  // so the away coefficient is e^{γ̂}.
  t.away.type = ContextType::away;
  t.away.value = 1;
  t.away.d = Eigen::VectorXd::Zero(w);
  if (home_basis) t.away.d(local_offset(home_term)) = -1.0;
  detail::set_interval(t.away, t);
  return t;
}

// Table from given coefficients (no uncertainty); unspecified states get 1.
inline AdjustmentTable from_coefficients(const std::map<int, double>& score, const std::map<int, double>& red_card,
                                         double away = 1.0, const BinningPolicy& policy = {}) {
  policy.validate();
  AdjustmentTable t;
  t.policy = policy;
  t.source_hash = "injected";
  auto fill = [](ContextType type, int cap, const std::map<int, double>& given) {
    std::vector<AdjustmentEntry> out;
    for (int v = -cap; v <= cap; ++v) {
      AdjustmentEntry e;
      e.type = type;
      e.value = v;
      const auto it = given.find(v);
      if (it != given.end() && v != 0) {
        if (!(it->second > 0.0)) throw DomainError("adjustment coefficients must be > 0");
        e.coef = e.ci_lo = e.ci_hi = it->second;
      }
      out.push_back(e);
    }
    return out;
  };
  t.score = fill(ContextType::score_diff, policy.score_cap, score);
  t.red_card = fill(ContextType::red_card_diff, policy.red_card_cap, red_card);
  if (!(away > 0.0)) throw DomainError("adjustment coefficients must be > 0");
  t.away.type = ContextType::away;
  t.away.value = 1;
  t.away.coef = t.away.ci_lo = t.away.ci_hi = away;
  return t;
}

inline void write_adjustment_table_csv(std::ostream& out, const AdjustmentTable& t) {
  out << "context_type,context_value,coef,ci_lo,ci_hi\n";
  auto row = [&](const AdjustmentEntry& e) {
    out << to_string(e.type) << ',' << e.value << ',' << detail::format_double(e.coef) << ','
        << detail::format_double(e.ci_lo) << ',' << detail::format_double(e.ci_hi) << '\n';
  };
  for (const auto& e : t.score) row(e);
  for (const auto& e : t.red_card) row(e);
  row(t.away);
}

inline json to_json(const AdjustmentTable& t) {
  auto entries = [](const std::vector<AdjustmentEntry>& v) {
    json a = json::array();
    for (const auto& e : v) a.push_back({{"value", e.value}, {"coef", e.coef}, {"ci_lo", e.ci_lo}, {"ci_hi", e.ci_hi}});
    return a;
  };
  return json{{"source_hash", t.source_hash},
              {"policy",
               {{"score_cap", t.policy.score_cap},
                {"red_card_cap", t.policy.red_card_cap},
                {"minute_cap", t.policy.minute_cap}}},
              {"score_diff", entries(t.score)},
              {"red_card_diff", entries(t.red_card)},
              {"away", {{"coef", t.away.coef}, {"ci_lo", t.away.ci_lo}, {"ci_hi", t.away.ci_hi}}}};
}

// ---------------------------------------------------------------------------
// Team-game adjustment

struct AdjustedStat {
  std::string game_id;
  std::string league;
  std::string season;
  std::string team;
  std::string opponent;
  bool home = false;
  double actual = 0.0;
  double adjusted = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  ContextBreakdown breakdown;
};

// adjusted = Σ_m count_m · c_score(s_m) · c_rc(rc_m) · c_away. The interval is
// a log-scale delta-method band using the full covariance of the coefficients.
inline AdjustedStat adjust_team_game(const std::vector<MinuteObservation>& minutes, const AdjustmentTable& table,
                                     Stat stat) {
  AdjustedStat out;
  if (!minutes.empty()) {
    const auto& f = minutes.front();
    out.game_id = f.game_id;
    out.league = f.league;
    out.season = f.season;
    out.team = f.team;
    out.opponent = f.opponent;
    out.home = f.home;
  }
  const bool with_cov = table.has_covariance();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(table.beta.size());
  for (const auto& raw : minutes) {
    const auto m = apply_binning(raw, table.policy);
    out.breakdown.add(m, stat);
    const double count = m.count(stat);
    out.actual += count;
    if (count == 0.0) continue;
    const auto& es = table.score_entry(m.score_diff);
    const auto& er = table.red_card_entry(m.red_card_diff);
    const double c = es.coef * er.coef * (m.home ? 1.0 : table.away.coef);
    const double contribution = count * c;
    out.adjusted += contribution;
    if (with_cov) {
      grad += contribution * es.d;
      grad += contribution * er.d;
      if (!m.home) grad += contribution * table.away.d;
    }
  }
  if (out.adjusted > 0.0 && with_cov) {
    const double sd = std::sqrt(std::max(0.0, grad.dot(table.cov * grad)));
    out.ci_lo = out.adjusted * std::exp(-kZ95 * sd / out.adjusted);
    out.ci_hi = out.adjusted * std::exp(kZ95 * sd / out.adjusted);
  } else {
    out.ci_lo = out.ci_hi = out.adjusted;
  }
  return out;
}

// Every team-game in `rows`, ordered by game_id then home team first.
inline std::vector<AdjustedStat> adjust_games(const std::vector<MinuteObservation>& rows, const AdjustmentTable& table,
                                              Stat stat) {
  std::map<std::pair<std::string, int>, std::vector<MinuteObservation>> groups;
  for (const auto& r : rows) groups[{r.game_id, r.home ? 0 : 1}].push_back(r);
  std::vector<AdjustedStat> out;
  out.reserve(groups.size());
  for (const auto& [key, minutes] : groups) out.push_back(adjust_team_game(minutes, table, stat));
  return out;
}

inline void write_game_report_csv(std::ostream& out, const std::vector<AdjustedStat>& games) {
  out << "league,team,opponent,season,actual,adjusted,ci_lo,ci_hi,up1goal_stat,up1goal_min,down1goal_stat,"
         "down1goal_min,up1man_stat,up1man_min,down1man_stat,down1man_min\n";
  using detail::format_double;
  for (const auto& g : games) {
    const auto& b = g.breakdown;
    out << g.league << ',' << g.team << ',' << g.opponent << ',' << g.season << ',' << format_double(g.actual) << ','
        << format_double(g.adjusted) << ',' << format_double(g.ci_lo) << ',' << format_double(g.ci_hi) << ','
        << format_double(b.up1goal_stat) << ',' << format_double(b.up1goal_min) << ','
        << format_double(b.down1goal_stat) << ',' << format_double(b.down1goal_min) << ','
        << format_double(b.up1man_stat) << ',' << format_double(b.up1man_min) << ','
        << format_double(b.down1man_stat) << ',' << format_double(b.down1man_min) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Season reports

struct SeasonSummary {
  std::string team;
  int games = 0;
  double actual_per_game = 0.0;
  double adjusted_per_game = 0.0;
  int rank_actual = 0;
  int rank_adjusted = 0;
  int points = 0;
  // Per-game output and minutes in each context, with league ranks of the output.
  ContextBreakdown per_game;
  int rank_up1goal = 0, rank_down1goal = 0, rank_up1man = 0, rank_down1man = 0;
  double shift() const { return adjusted_per_game - actual_per_game; }
};

struct SeasonReport {
  std::string league;
  std::string season;
  std::vector<SeasonSummary> teams;    // ranked teams, by team name
  std::vector<std::string> excluded;  // fewer than min_games games
  std::vector<std::string> strongest_positive;
  std::vector<std::string> strongest_negative;
};

// Ranks with 1 for the largest value; ties broken by team name.
inline std::vector<int> rank_descending(const std::vector<double>& values, const std::vector<std::string>& names) {
  std::vector<std::size_t> order(values.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return names[a] < names[b];
  });
  std::vector<int> rank(values.size());
  for (std::size_t k = 0; k < order.size(); ++k) rank[order[k]] = static_cast<int>(k) + 1;
  return rank;
}

// Points per team from match results: 3 per win, 1 per draw.
inline std::map<std::string, int> points_table(const std::vector<GameResult>& results) {
  std::map<std::string, int> pts;
  for (const auto& r : results) {
    pts[r.home_team] += r.points(true);
    pts[r.away_team] += r.points(false);
  }
  return pts;
}

inline SeasonReport season_report(const std::vector<MinuteObservation>& rows, const std::vector<GameResult>& results,
                                  const AdjustmentTable& table, Stat stat, int min_games = 5, int flagged = 5) {
  SeasonReport rep;
  if (!rows.empty()) {
    rep.league = rows.front().league;
    rep.season = rows.front().season;
  }
  struct Acc {
    std::set<std::string> games;
    double actual = 0.0, adjusted = 0.0;
    ContextBreakdown ctx;
  };
  std::map<std::string, Acc> acc;
  for (const auto& g : adjust_games(rows, table, stat)) {
    auto& a = acc[g.team];
    a.games.insert(g.game_id);
    a.actual += g.actual;
    a.adjusted += g.adjusted;
    const auto& b = g.breakdown;
    a.ctx.up1goal_stat += b.up1goal_stat, a.ctx.up1goal_min += b.up1goal_min;
    a.ctx.down1goal_stat += b.down1goal_stat, a.ctx.down1goal_min += b.down1goal_min;
    a.ctx.up1man_stat += b.up1man_stat, a.ctx.up1man_min += b.up1man_min;
    a.ctx.down1man_stat += b.down1man_stat, a.ctx.down1man_min += b.down1man_min;
  }
  const auto pts = points_table(results);
  for (const auto& [team, a] : acc) {
    const int g = static_cast<int>(a.games.size());
    if (g < min_games) {
      rep.excluded.push_back(team);
      continue;
    }
    SeasonSummary s;
    s.team = team;
    s.games = g;
    s.actual_per_game = a.actual / g;
    s.adjusted_per_game = a.adjusted / g;
    const auto it = pts.find(team);
    s.points = it == pts.end() ? 0 : it->second;
    s.per_game = a.ctx;
    for (double* v : {&s.per_game.up1goal_stat, &s.per_game.up1goal_min, &s.per_game.down1goal_stat,
                      &s.per_game.down1goal_min, &s.per_game.up1man_stat, &s.per_game.up1man_min,
                      &s.per_game.down1man_stat, &s.per_game.down1man_min})
      *v /= g;
    rep.teams.push_back(s);
  }
  std::vector<std::string> names;
  for (const auto& s : rep.teams) names.push_back(s.team);
  auto ranks = [&](auto get) {
    std::vector<double> v;
    for (const auto& s : rep.teams) v.push_back(get(s));
    return rank_descending(v, names);
  };
  const auto ra = ranks([](const SeasonSummary& s) { return s.actual_per_game; });
  const auto rd = ranks([](const SeasonSummary& s) { return s.adjusted_per_game; });
  const auto r1 = ranks([](const SeasonSummary& s) { return s.per_game.up1goal_stat; });
  const auto r2 = ranks([](const SeasonSummary& s) { return s.per_game.down1goal_stat; });
  const auto r3 = ranks([](const SeasonSummary& s) { return s.per_game.up1man_stat; });
  const auto r4 = ranks([](const SeasonSummary& s) { return s.per_game.down1man_stat; });
  for (std::size_t i = 0; i < rep.teams.size(); ++i) {
    auto& s = rep.teams[i];
    s.rank_actual = ra[i], s.rank_adjusted = rd[i];
    s.rank_up1goal = r1[i], s.rank_down1goal = r2[i], s.rank_up1man = r3[i], s.rank_down1man = r4[i];
  }
  std::vector<const SeasonSummary*> by_shift;
  for (const auto& s : rep.teams) by_shift.push_back(&s);
  std::sort(by_shift.begin(), by_shift.end(), [](const auto* a, const auto* b) {
    if (a->shift() != b->shift()) return a->shift() > b->shift();
    return a->team < b->team;
  });
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(flagged), by_shift.size());
  for (std::size_t i = 0; i < k; ++i) {
    if (by_shift[i]->shift() > 0.0) rep.strongest_positive.push_back(by_shift[i]->team);
    const auto* neg = by_shift[by_shift.size() - 1 - i];
    if (neg->shift() < 0.0) rep.strongest_negative.push_back(neg->team);
  }
  return rep;
}

inline void write_season_report_csv(std::ostream& out, const SeasonReport& rep) {
  using detail::format_double;
  out << "league,season,team,games,points,actual_per_game,adjusted_per_game,rank_actual,rank_adjusted,shift,"
         "up1goal_stat,up1goal_min,rank_up1goal,down1goal_stat,down1goal_min,rank_down1goal,up1man_stat,"
         "up1man_min,rank_up1man,down1man_stat,down1man_min,rank_down1man\n";
  for (const auto& s : rep.teams) {
    const auto& b = s.per_game;
    out << rep.league << ',' << rep.season << ',' << s.team << ',' << s.games << ',' << s.points << ','
        << format_double(s.actual_per_game) << ',' << format_double(s.adjusted_per_game) << ',' << s.rank_actual
        << ',' << s.rank_adjusted << ',' << format_double(s.shift()) << ',' << format_double(b.up1goal_stat) << ','
        << format_double(b.up1goal_min) << ',' << s.rank_up1goal << ',' << format_double(b.down1goal_stat) << ','
        << format_double(b.down1goal_min) << ',' << s.rank_down1goal << ',' << format_double(b.up1man_stat) << ','
        << format_double(b.up1man_min) << ',' << s.rank_up1man << ',' << format_double(b.down1man_stat) << ','
        << format_double(b.down1man_min) << ',' << s.rank_down1man << '\n';
  }
}

// ---------------------------------------------------------------------------
// Correlation analysis across league-seasons

struct CorrelationRow {
  std::string category;
  double actual_mean = 0.0, actual_se = 0.0;
  double adjusted_mean = 0.0, adjusted_se = 0.0;
  std::size_t n_actual = 0, n_adjusted = 0;
  std::size_t excluded_actual = 0, excluded_adjusted = 0;  // undefined (constant) seasons
};

inline const std::vector<std::string>& correlation_categories() {
  static const std::vector<std::string> c{"points", "up1goal", "down1goal", "up1man", "down1man"};
  return c;
}

inline double category_value(const SeasonSummary& s, const std::string& category) {
  if (category == "points") return s.points;
  if (category == "up1goal") return s.per_game.up1goal_stat;
  if (category == "down1goal") return s.per_game.down1goal_stat;
  if (category == "up1man") return s.per_game.up1man_stat;
  if (category == "down1man") return s.per_game.down1man_stat;
  throw InputError("unknown correlation category '" + category + "'");
}

// Per league-season Pearson correlations across teams; mean and SE = sd/√n.
inline std::vector<CorrelationRow> correlation_analysis(const std::vector<SeasonReport>& reports) {
  if (reports.size() < 2) throw PreconditionError("correlation analysis needs at least 2 league-seasons");
  std::vector<CorrelationRow> out;
  for (const auto& cat : correlation_categories()) {
    CorrelationRow row;
    row.category = cat;
    std::vector<double> ca, cd;
    for (const auto& rep : reports) {
      std::vector<double> x, a, d;
      for (const auto& s : rep.teams) {
        x.push_back(category_value(s, cat));
        a.push_back(s.actual_per_game);
        d.push_back(s.adjusted_per_game);
      }
      const double ra = x.size() >= 2 ? stats::pearson(x, a) : std::nan("");
      const double rd = x.size() >= 2 ? stats::pearson(x, d) : std::nan("");
      if (std::isfinite(ra)) ca.push_back(ra);
      else ++row.excluded_actual;
      if (std::isfinite(rd)) cd.push_back(rd);
      else ++row.excluded_adjusted;
    }
    auto summarize = [](const std::vector<double>& v, double& mean, double& se) {
      mean = v.empty() ? std::nan("") : stats::mean(v);
      se = v.size() >= 2 ? stats::sd(v) / std::sqrt(static_cast<double>(v.size())) : std::nan("");
    };
    summarize(ca, row.actual_mean, row.actual_se);
    summarize(cd, row.adjusted_mean, row.adjusted_se);
    row.n_actual = ca.size();
    row.n_adjusted = cd.size();
    out.push_back(row);
  }
  return out;
}

inline void write_correlation_csv(std::ostream& out, const std::vector<CorrelationRow>& rows) {
  using detail::format_double;
  out << "category,actual_mean,actual_se,adjusted_mean,adjusted_se,n_actual,n_adjusted,excluded_actual,"
         "excluded_adjusted\n";
  for (const auto& r : rows) {
    out << r.category << ',' << format_double(r.actual_mean) << ',' << format_double(r.actual_se) << ','
        << format_double(r.adjusted_mean) << ',' << format_double(r.adjusted_se) << ',' << r.n_actual << ','
        << r.n_adjusted << ',' << r.excluded_actual << ',' << r.excluded_adjusted << '\n';
  }
}

}  // namespace ctxadjust
