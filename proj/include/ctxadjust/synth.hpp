#pragma once

// Synthetic leagues from a fully known generative model. Every team-minute
// draws shots with log-mean equal to the true linear predictor of its
// context; shots turn into goals by a per-shot Bernoulli draw, so the score
// state (and with it the context) evolves from the simulated events.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ctxadjust/adjustment.hpp"
#include "ctxadjust/data_model.hpp"
#include "ctxadjust/errors.hpp"
#include "ctxadjust/parallel.hpp"
#include "ctxadjust/random.hpp"
#include "ctxadjust/serialization.hpp"

namespace ctxadjust {

struct GeneratorConfig {
  std::string league = "ENG";
  int teams = 16;
  std::vector<double> strengths;  // empty: evenly spaced in [-strength_spread, strength_spread]
  double strength_spread = 1.0;
  int seasons = 1;
  int first_season = 2008;
  std::uint64_t seed = 1;

  std::string family = "negative_binomial";  // poisson | negative_binomial | zip
  double theta = 1.5;
  double zero_inflation = 0.25;  // π for zip

  double intercept = std::log(0.14);
  // Effects on the linear predictor, indexed from -cap to +cap; values beyond
  // the caps use the boundary entry.
  std::vector<double> score_effect{0.22, 0.18, 0.12, 0.0, -0.12, -0.2, -0.25};
  std::vector<double> red_card_effect{0.2, 0.12, 0.0, -0.2, -0.35};
  double home_effect = std::log(1.1);
  double win_prob_slope = 0.6;
  std::array<double, 2> minute_start{-0.3, -0.2};  // log-rate offset in the first minute of each half
  double minute_ramp = 6.0;                        // decay (minutes) of the start-of-half offset
  std::array<double, 2> minute_slope{0.05, 0.1};   // linear drift across each half
  double team_sd = 0.1;
  double season_sd = 0.05;
  double game_sd = 0.0;
  double score_minute_interaction = 0.0;  // adds k·s·(gm-45.5)/45 with s the binned score differential

  double corner_intercept = std::log(0.06);
  double goal_probability = 0.1;
  double red_card_hazard = 0.0015;
  std::array<int, 2> max_added{3, 6};
  double overround = 0.05;
  double draw_width = 0.6;  // ordered-logit cutpoint for the 1X2 probabilities

  int score_cap() const { return static_cast<int>(score_effect.size() / 2); }
  int red_card_cap() const { return static_cast<int>(red_card_effect.size() / 2); }

  void validate() const {
    if (teams < 2) throw DomainError("generator needs at least 2 teams");
    if (teams % 2 != 0) throw DomainError("generator needs an even number of teams");
    if (seasons < 1) throw DomainError("generator needs at least 1 season");
    if (!strengths.empty() && static_cast<int>(strengths.size()) != teams) {
      throw DomainError("strength vector length must equal the team count");
    }
    for (double s : strengths)
      if (!std::isfinite(s)) throw DomainError("strengths must be finite");
    if (family != "poisson" && family != "negative_binomial" && family != "zip") {
      throw DomainError("generator family must be poisson, negative_binomial or zip");
    }
    if (!(theta > 0.0)) throw DomainError("theta must be > 0");
    for (double p : {zero_inflation, goal_probability, red_card_hazard}) {
      if (!(p >= 0.0 && p <= 1.0)) throw DomainError("probabilities must lie in [0, 1]");
    }
    if (score_effect.size() % 2 != 1 || red_card_effect.size() % 2 != 1) {
      throw DomainError("effect tables need an odd length (centered on 0)");
    }
  }

  std::vector<double> team_strengths() const {
    if (!strengths.empty()) return strengths;
    std::vector<double> s(static_cast<std::size_t>(teams));
    for (int i = 0; i < teams; ++i) s[static_cast<std::size_t>(i)] = -strength_spread + 2.0 * strength_spread * i / (teams - 1);
    return s;
  }

  std::string team_name(int i) const {
    const auto idx = std::to_string(i + 1);
    return "Team" + std::string(idx.size() < 2 ? "0" : "") + idx;
  }

  std::string season_label(int s) const {
    const int y = first_season + s;
    const int next = (y + 1) % 100;
    return std::to_string(y) + "/" + (next < 10 ? "0" : "") + std::to_string(next);
  }

  double score_term(int s) const {
    const int cap = score_cap();
    return score_effect[static_cast<std::size_t>(std::clamp(s, -cap, cap) + cap)];
  }
  double red_card_term(int rc) const {
    const int cap = red_card_cap();
    return red_card_effect[static_cast<std::size_t>(std::clamp(rc, -cap, cap) + cap)];
  }
  double minute_term(int half, int minute) const {
    const int m = std::min(minute, 45);
    const auto h = static_cast<std::size_t>(half - 1);
    return minute_start[h] * std::exp(-(m - 1) / minute_ramp) + minute_slope[h] * (m - 23.0) / 45.0;
  }

  // Context part of the true linear predictor (no team/season/game effects).
  double context_eta(int score_diff, int red_card_diff, bool home, double win_prob_diff, int half, int minute) const {
    double eta = intercept + score_term(score_diff) + red_card_term(red_card_diff) + (home ? home_effect : 0.0) +
                 win_prob_slope * win_prob_diff + minute_term(half, minute);
    if (score_minute_interaction != 0.0) {
      const int cap = score_cap();
      const double gm = (half - 1) * 45 + std::min(minute, 45);
      eta += score_minute_interaction * std::clamp(score_diff, -cap, cap) * (gm - 45.5) / 45.0;
    }
    return eta;
  }
};

inline json to_json(const GeneratorConfig& c) {
  return json{{"league", c.league},
              {"teams", c.teams},
              {"strengths", c.strengths},
              {"strength_spread", c.strength_spread},
              {"seasons", c.seasons},
              {"first_season", c.first_season},
              {"seed", c.seed},
              {"family", c.family},
              {"theta", c.theta},
              {"zero_inflation", c.zero_inflation},
              {"intercept", c.intercept},
              {"score_effect", c.score_effect},
              {"red_card_effect", c.red_card_effect},
              {"home_effect", c.home_effect},
              {"win_prob_slope", c.win_prob_slope},
              {"minute_start", c.minute_start},
              {"minute_ramp", c.minute_ramp},
              {"minute_slope", c.minute_slope},
              {"team_sd", c.team_sd},
              {"season_sd", c.season_sd},
              {"game_sd", c.game_sd},
              {"score_minute_interaction", c.score_minute_interaction},
              {"corner_intercept", c.corner_intercept},
              {"goal_probability", c.goal_probability},
              {"red_card_hazard", c.red_card_hazard},
              {"max_added", c.max_added},
              {"overround", c.overround},
              {"draw_width", c.draw_width}};
}

inline GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw InputError("unknown generator config key '" + key + "'");
  }
  json merged = defaults;
  merged.update(j);
  c.league = merged.at("league").get<std::string>();
  c.teams = merged.at("teams").get<int>();
  c.strengths = merged.at("strengths").get<std::vector<double>>();
  c.strength_spread = merged.at("strength_spread").get<double>();
  c.seasons = merged.at("seasons").get<int>();
  c.first_season = merged.at("first_season").get<int>();
  c.seed = merged.at("seed").get<std::uint64_t>();
  c.family = merged.at("family").get<std::string>();
  c.theta = merged.at("theta").get<double>();
  c.zero_inflation = merged.at("zero_inflation").get<double>();
  c.intercept = merged.at("intercept").get<double>();
  c.score_effect = merged.at("score_effect").get<std::vector<double>>();
  c.red_card_effect = merged.at("red_card_effect").get<std::vector<double>>();
  c.home_effect = merged.at("home_effect").get<double>();
  c.win_prob_slope = merged.at("win_prob_slope").get<double>();
  c.minute_start = merged.at("minute_start").get<std::array<double, 2>>();
  c.minute_ramp = merged.at("minute_ramp").get<double>();
  c.minute_slope = merged.at("minute_slope").get<std::array<double, 2>>();
  c.team_sd = merged.at("team_sd").get<double>();
  c.season_sd = merged.at("season_sd").get<double>();
  c.game_sd = merged.at("game_sd").get<double>();
  c.score_minute_interaction = merged.at("score_minute_interaction").get<double>();
  c.corner_intercept = merged.at("corner_intercept").get<double>();
  c.goal_probability = merged.at("goal_probability").get<double>();
  c.red_card_hazard = merged.at("red_card_hazard").get<double>();
  c.max_added = merged.at("max_added").get<std::array<int, 2>>();
  c.overround = merged.at("overround").get<double>();
  c.draw_width = merged.at("draw_width").get<double>();
  if (!league_codes().contains(c.league)) throw DomainError("unknown league code '" + c.league + "'");
  c.validate();
  return c;
}

struct SyntheticLeague {
  std::vector<MinuteObservation> rows;
  std::vector<double> true_eta;  // per row, shots
  std::vector<GameDescriptor> fixtures;
  std::vector<GameResult> results;
  std::map<std::string, OddsTriple> odds;
};

struct StandingsRow {
  std::string season;
  std::string team;
  int played = 0, wins = 0, draws = 0, losses = 0, goals_for = 0, goals_against = 0, points = 0;
};

inline std::vector<StandingsRow> final_table(const std::vector<GameResult>& results) {
  std::map<std::pair<std::string, std::string>, StandingsRow> rows;
  for (const auto& r : results) {
    for (bool home : {true, false}) {
      auto& s = rows[{r.season, home ? r.home_team : r.away_team}];
      s.season = r.season;
      s.team = home ? r.home_team : r.away_team;
      const int gf = home ? r.home_goals : r.away_goals, ga = home ? r.away_goals : r.home_goals;
      ++s.played;
      s.goals_for += gf;
      s.goals_against += ga;
      if (gf > ga) ++s.wins;
      else if (gf == ga) ++s.draws;
      else ++s.losses;
      s.points = 3 * s.wins + s.draws;
    }
  }
  std::vector<StandingsRow> out;
  for (auto& [k, v] : rows) out.push_back(v);
  return out;
}

// Double round robin by the circle method: round r of the first leg pairs
// rotated positions; the second leg repeats it with venues swapped.
inline std::vector<std::vector<std::pair<int, int>>> double_round_robin(int teams) {
  std::vector<int> pos(static_cast<std::size_t>(teams));
  for (int i = 0; i < teams; ++i) pos[static_cast<std::size_t>(i)] = i;
  std::vector<std::vector<std::pair<int, int>>> rounds;
  for (int r = 0; r < teams - 1; ++r) {
    std::vector<std::pair<int, int>> games;
    for (int i = 0; i < teams / 2; ++i) {
      int a = pos[static_cast<std::size_t>(i)], b = pos[static_cast<std::size_t>(teams - 1 - i)];
      if ((r + i) % 2 == 1) std::swap(a, b);
      games.emplace_back(a, b);
    }
    rounds.push_back(games);
    std::rotate(pos.begin() + 1, pos.end() - 1, pos.end());
  }
  const auto first_leg = rounds.size();
  for (std::size_t r = 0; r < first_leg; ++r) {
    auto games = rounds[r];
    for (auto& g : games) std::swap(g.first, g.second);
    rounds.push_back(games);
  }
  return rounds;
}

inline WinProbabilities strength_probabilities(double home_strength, double away_strength, double width) {
  const double d = home_strength - away_strength;
  auto logistic = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double away = logistic(-width - d);
  const double home = 1.0 - logistic(width - d);
  return {home, 1.0 - home - away, away};
}

namespace detail {

struct GameOutput {
  std::vector<MinuteObservation> rows;
  std::vector<double> eta;
  GameResult result;
};

inline std::int64_t draw_count(RandomStream& rng, const GeneratorConfig& c, double mean) {
  if (c.family == "poisson") return rng.poisson(mean);
  if (c.family == "negative_binomial") return rng.negative_binomial(mean, c.theta);
  if (rng.bernoulli(c.zero_inflation)) return 0;
  return rng.poisson(mean);
}

inline GameOutput simulate_game(const GeneratorConfig& c, const GameDescriptor& g, const std::array<double, 2>& re,
                                double wp_home, std::uint64_t seed) {
  RandomStream rng(seed);
  GameOutput out;
  const double game_effect = c.game_sd > 0.0 ? c.game_sd * rng.normal() : 0.0;
  std::array<int, 2> added{rng.uniform_int(0, c.max_added[0]), rng.uniform_int(0, c.max_added[1])};
  std::array<int, 2> goals{0, 0}, reds{0, 0};
  const std::array<std::string, 2> names{g.home_team, g.away_team};
  for (int half = 1; half <= 2; ++half) {
    const int minutes = 45 + added[static_cast<std::size_t>(half - 1)];
    for (int m = 1; m <= minutes; ++m) {
      std::array<int, 2> new_goals{0, 0}, new_reds{0, 0};
      for (int side = 0; side < 2; ++side) {
        const auto s = static_cast<std::size_t>(side), o = static_cast<std::size_t>(1 - side);
        MinuteObservation row;
        row.game_id = g.game_id;
        row.team = names[s];
        row.opponent = names[o];
        row.home = side == 0;
        row.season = g.season;
        row.league = g.league;
        row.half = half;
        row.minute = m;
        row.score_diff = goals[s] - goals[o];
        row.red_card_diff = reds[s] - reds[o];
        row.win_prob_diff = side == 0 ? wp_home : -wp_home;
        const double eta = c.context_eta(row.score_diff, row.red_card_diff, row.home, row.win_prob_diff, half, m) +
                           re[s] + game_effect;
        const auto shots = draw_count(rng, c, std::exp(eta));
        row.shots = static_cast<int>(shots);
        for (std::int64_t k = 0; k < shots; ++k)
          if (rng.bernoulli(c.goal_probability)) ++new_goals[s];
        row.corners = static_cast<int>(rng.poisson(std::exp(c.corner_intercept + eta - c.intercept)));
        if (rng.bernoulli(c.red_card_hazard)) ++new_reds[s];
        out.rows.push_back(std::move(row));
        out.eta.push_back(eta);
      }
      for (int side = 0; side < 2; ++side) {
        goals[static_cast<std::size_t>(side)] += new_goals[static_cast<std::size_t>(side)];
        reds[static_cast<std::size_t>(side)] += new_reds[static_cast<std::size_t>(side)];
      }
    }
  }
  out.result = GameResult{g.game_id, g.season, g.league, g.round, g.home_team, g.away_team, goals[0], goals[1]};
  return out;
}

}  // namespace detail

// Deterministic in the seed: each game draws from its own stream keyed by its
// game_id, so the thread count does not change the output.
inline SyntheticLeague simulate_league(const GeneratorConfig& c, unsigned threads = 1) {
  c.validate();
  const auto strengths = c.team_strengths();
  RandomStream team_rng(derive_seed(c.seed, "team-effects"));
  std::vector<double> team_re(static_cast<std::size_t>(c.teams));
  for (auto& t : team_re) t = c.team_sd * team_rng.normal();

  SyntheticLeague league;
  std::vector<double> game_wp;
  std::vector<std::array<double, 2>> game_re;
  const auto rounds = double_round_robin(c.teams);
  for (int s = 0; s < c.seasons; ++s) {
    RandomStream season_rng(derive_seed(c.seed, "season-effect", static_cast<std::uint64_t>(s)));
    const double season_re = c.season_sd * season_rng.normal();
    const auto label = c.season_label(s);
    int index = 0;
    for (std::size_t r = 0; r < rounds.size(); ++r) {
      for (const auto& [h, a] : rounds[r]) {
        GameDescriptor g;
        g.league = c.league;
        g.season = label;
        g.round = static_cast<int>(r) + 1;
        g.home_team = c.team_name(h);
        g.away_team = c.team_name(a);
        const auto idx = std::to_string(++index);
        g.game_id = c.league + std::to_string(c.first_season + s) + "-" + std::string(3 - std::min<std::size_t>(idx.size(), 3), '0') + idx;
        const auto p = strength_probabilities(strengths[static_cast<std::size_t>(h)], strengths[static_cast<std::size_t>(a)], c.draw_width);
        const double k = 1.0 + c.overround;
        // Heavy favourites would otherwise be quoted at or below 1.0; floor at 1.01.
        auto quote = [k](double q) { return std::max(1.01, 1.0 / (q * k)); };
        const OddsTriple odds{quote(p.home), quote(p.draw), quote(p.away)};
        league.odds[g.game_id] = odds;
        game_wp.push_back(odds_to_win_prob(odds).home_minus_away());
        game_re.push_back({team_re[static_cast<std::size_t>(h)] + season_re, team_re[static_cast<std::size_t>(a)] + season_re});
        league.fixtures.push_back(std::move(g));
      }
    }
  }

  std::vector<detail::GameOutput> games(league.fixtures.size());
  parallel_for(games.size(), threads, [&](std::size_t i) {
    const auto& g = league.fixtures[i];
    games[i] = detail::simulate_game(c, g, game_re[i], game_wp[i], derive_seed(c.seed, g.game_id));
  });
  std::size_t total = 0;
  for (const auto& g : games) total += g.rows.size();
  league.rows.reserve(total);
  league.true_eta.reserve(total);
  for (std::size_t i = 0; i < games.size(); ++i) {
    auto& g = games[i];
    league.fixtures[i].home_goals = g.result.home_goals;
    league.fixtures[i].away_goals = g.result.away_goals;
    league.results.push_back(g.result);
    std::move(g.rows.begin(), g.rows.end(), std::back_inserter(league.rows));
    league.true_eta.insert(league.true_eta.end(), g.eta.begin(), g.eta.end());
  }
  return league;
}

inline void write_truth_csv(std::ostream& out, const std::vector<double>& eta) {
  out << "row_id,true_eta\n";
  for (std::size_t i = 0; i < eta.size(); ++i) out << i << ',' << detail::format_double(eta[i]) << '\n';
}

inline void write_odds_csv(std::ostream& out, const std::map<std::string, OddsTriple>& odds) {
  out << "game_id,home_odds,draw_odds,away_odds\n";
  for (const auto& [id, o] : odds) {
    out << id << ',' << detail::format_double(o.home_odds) << ',' << detail::format_double(o.draw_odds) << ','
        << detail::format_double(o.away_odds) << '\n';
  }
}

// Exact coefficients e^{-(η(c) - η(0))} implied by the generator's effects.
inline AdjustmentTable true_adjustment_table(const GeneratorConfig& c, const BinningPolicy& policy = {}) {
  c.validate();
  std::map<int, double> score, red;
  for (int s = -policy.score_cap; s <= policy.score_cap; ++s) score[s] = std::exp(-(c.score_term(s) - c.score_term(0)));
  for (int r = -policy.red_card_cap; r <= policy.red_card_cap; ++r)
    red[r] = std::exp(-(c.red_card_term(r) - c.red_card_term(0)));
  auto t = from_coefficients(score, red, std::exp(c.home_effect), policy);
  t.source_hash = "generator";
  return t;
}

}  // namespace ctxadjust
