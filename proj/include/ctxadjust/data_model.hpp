#pragma once

// Minute-by-minute observation schema, input parsing (minute CSV, odds CSV,
// results CSV, commentary text), odds conversion and extreme-value binning.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <utility>
#include <vector>

#include "ctxadjust/errors.hpp"

namespace ctxadjust {

enum class Stat { shots, corners };

inline std::string to_string(Stat s) { return s == Stat::shots ? "shots" : "corners"; }

inline Stat parse_stat(std::string_view s) {
  if (s == "shots") return Stat::shots;
  if (s == "corners") return Stat::corners;
  throw InputError("unknown statistic '" + std::string(s) + "' (expected shots or corners)");
}

inline const std::set<std::string, std::less<>>& league_codes() {
  static const std::set<std::string, std::less<>> codes{"ENG", "FRA", "GER", "ITA", "SPA"};
  return codes;
}

// One team-minute. Diffs are team minus opponent at the START of the minute;
// red_card_diff > 0 means the team has fewer players.
struct MinuteObservation {
  std::string game_id;
  std::string team;
  std::string opponent;
  bool home = false;
  std::string season;
  std::string league;
  int half = 1;
  int minute = 1;
  int score_diff = 0;
  int red_card_diff = 0;
  double win_prob_diff = 0.0;
  int shots = 0;
  int corners = 0;

  int count(Stat s) const { return s == Stat::shots ? shots : corners; }
  bool operator==(const MinuteObservation&) const = default;
};

enum class EventKind { goal, shot_attempt, corner, red_card, yellow_card, game_start, half_start, game_end };

inline std::string to_string(EventKind k) {
  switch (k) {
    case EventKind::goal: return "goal";
    case EventKind::shot_attempt: return "shot_attempt";
    case EventKind::corner: return "corner";
    case EventKind::red_card: return "red_card";
    case EventKind::yellow_card: return "yellow_card";
    case EventKind::game_start: return "game_start";
    case EventKind::half_start: return "half_start";
    case EventKind::game_end: return "game_end";
  }
  return "unknown";
}

struct MatchEvent {
  std::string game_id;
  int half = 1;
  int minute = 1;  // minute within the half (second half restarts at 1)
  EventKind kind = EventKind::shot_attempt;
  std::string team;  // empty for control events and unattributed events
  bool attributed = true;

  bool operator==(const MatchEvent&) const = default;
};

struct OddsTriple {
  double home_odds = 0.0;
  double draw_odds = 0.0;
  double away_odds = 0.0;
};

struct WinProbabilities {
  double home = 0.0;
  double draw = 0.0;
  double away = 0.0;
  double home_minus_away() const { return home - away; }
};

struct BinningPolicy {
  int score_cap = 3;
  int red_card_cap = 2;
  int minute_cap = 45;

  void validate() const {
    if (score_cap <= 0 || red_card_cap <= 0 || minute_cap <= 0) {
      throw DomainError("binning caps must be positive");
    }
  }
  bool operator==(const BinningPolicy&) const = default;
};

// Game metadata needed to turn events into minute rows.
struct GameDescriptor {
  std::string game_id;
  std::string season;
  std::string league;
  int round = 0;
  std::string home_team;
  std::string away_team;
  std::optional<int> home_goals;
  std::optional<int> away_goals;
};

struct GameResult {
  std::string game_id;
  std::string season;
  std::string league;
  int round = 0;
  std::string home_team;
  std::string away_team;
  int home_goals = 0;
  int away_goals = 0;

  int points(bool for_home) const {
    const int diff = for_home ? home_goals - away_goals : away_goals - home_goals;
    return diff > 0 ? 3 : (diff == 0 ? 1 : 0);
  }
  bool operator==(const GameResult&) const = default;
};

struct RowIssue {
  std::size_t line = 0;
  std::string message;
};

struct MinuteTable {
  std::vector<MinuteObservation> rows;
  std::vector<RowIssue> issues;

  // Throws the first recorded row problem, if any.
  void require_clean() const {
    if (!issues.empty()) throw RowError(issues.front().line, issues.front().message);
  }
};

inline const std::vector<std::string>& minute_csv_columns() {
  static const std::vector<std::string> cols{"game_id", "team",          "opponent",      "home",
                                             "season",  "league",        "half",          "minute",
                                             "score_diff", "red_card_diff", "win_prob_diff", "shots",
                                             "corners"};
  return cols;
}

namespace detail {

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<long long> parse_int(std::string_view s) {
  s = trim(s);
  long long v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end || s.empty()) return std::nullopt;
  return v;
}

inline std::optional<double> parse_double(std::string_view s) {
  s = trim(s);
  double v = 0.0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || ptr != end || s.empty() || !std::isfinite(v)) return std::nullopt;
  return v;
}

// Shortest round-trip decimal representation; identical on every platform.
inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  if (ec != std::errc{}) return "nan";
  return std::string(buf.data(), ptr);
}

inline void check_header(std::string_view header, const std::vector<std::string>& expected) {
  auto cols = split_csv(trim(header));
  for (auto& c : cols) c = trim(c);
  for (const auto& name : expected) {
    if (std::find(cols.begin(), cols.end(), name) == cols.end()) {
      throw SchemaError("missing column '" + name + "'");
    }
  }
  if (cols.size() != expected.size() || !std::equal(expected.begin(), expected.end(), cols.begin())) {
    throw SchemaError("header must be exactly: " + [&] {
      std::string h;
      for (std::size_t i = 0; i < expected.size(); ++i) h += (i ? "," : "") + expected[i];
      return h;
    }());
  }
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  return in;
}

}  // namespace detail

// Parses minute rows from a stream. Valid rows are returned in order; each
// invalid row produces one RowIssue (line numbers are 1-based, header = 1).
inline MinuteTable parse_minute_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty file: header row required");
  detail::check_header(line, minute_csv_columns());
  MinuteTable table;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(detail::trim(line));
    auto fail = [&](const std::string& msg) { table.issues.push_back({lineno, msg}); };
    if (f.size() != 13) {
      fail("expected 13 fields, found " + std::to_string(f.size()));
      continue;
    }
    MinuteObservation o;
    o.game_id = std::string(detail::trim(f[0]));
    o.team = std::string(detail::trim(f[1]));
    o.opponent = std::string(detail::trim(f[2]));
    o.season = std::string(detail::trim(f[4]));
    o.league = std::string(detail::trim(f[5]));
    const auto home = detail::parse_int(f[3]);
    const auto half = detail::parse_int(f[6]);
    const auto minute = detail::parse_int(f[7]);
    const auto sd = detail::parse_int(f[8]);
    const auto rc = detail::parse_int(f[9]);
    const auto wp = detail::parse_double(f[10]);
    const auto shots = detail::parse_int(f[11]);
    const auto corners = detail::parse_int(f[12]);
    if (o.game_id.empty() || o.team.empty() || o.opponent.empty()) {
      fail("game_id, team and opponent must be non-empty");
    } else if (!home || (*home != 0 && *home != 1)) {
      fail("home must be 0 or 1");
    } else if (!league_codes().contains(o.league)) {
      fail("unknown league code '" + o.league + "'");
    } else if (!half || (*half != 1 && *half != 2)) {
      fail("half must be 1 or 2");
    } else if (!minute) {
      fail("minute must be an integer");
    } else if (*minute < 1) {
      fail("minute must be ≥ 1");
    } else if (!sd || !rc) {
      fail("score_diff and red_card_diff must be integers");
    } else if (!wp || *wp < -1.0 || *wp > 1.0) {
      fail("win_prob_diff must be a real number in [-1, 1]");
    } else if (!shots || !corners) {
      fail("shots and corners must be non-negative integers");
    } else if (*shots < 0 || *corners < 0) {
      fail("shots and corners must be non-negative integers");
    } else {
      o.home = *home == 1;
      o.half = static_cast<int>(*half);
      o.minute = static_cast<int>(*minute);
      o.score_diff = static_cast<int>(*sd);
      o.red_card_diff = static_cast<int>(*rc);
      o.win_prob_diff = *wp;
      o.shots = static_cast<int>(*shots);
      o.corners = static_cast<int>(*corners);
      table.rows.push_back(std::move(o));
    }
  }
  return table;
}

inline MinuteTable parse_minute_csv(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_minute_csv(in);
}

inline void write_minute_csv(std::ostream& out, const std::vector<MinuteObservation>& rows) {
  const auto& cols = minute_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : rows) {
    out << r.game_id << ',' << r.team << ',' << r.opponent << ',' << (r.home ? 1 : 0) << ',' << r.season << ','
        << r.league << ',' << r.half << ',' << r.minute << ',' << r.score_diff << ',' << r.red_card_diff << ','
        << detail::format_double(r.win_prob_diff) << ',' << r.shots << ',' << r.corners << '\n';
  }
}

inline WinProbabilities odds_to_win_prob(const OddsTriple& odds) {
  for (double o : {odds.home_odds, odds.draw_odds, odds.away_odds}) {
    if (!std::isfinite(o) || !(o > 1.0)) throw DomainError("decimal odds must be finite and > 1.0");
  }
  const double ih = 1.0 / odds.home_odds, id = 1.0 / odds.draw_odds, ia = 1.0 / odds.away_odds;
  const double total = ih + id + ia;
  return {ih / total, id / total, ia / total};
}

inline std::map<std::string, OddsTriple> parse_odds_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty odds file");
  detail::check_header(line, {"game_id", "home_odds", "draw_odds", "away_odds"});
  std::map<std::string, OddsTriple> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(detail::trim(line));
    if (f.size() != 4) throw RowError(lineno, "expected 4 fields");
    const auto h = detail::parse_double(f[1]), d = detail::parse_double(f[2]), a = detail::parse_double(f[3]);
    if (!h || !d || !a) throw RowError(lineno, "odds must be real numbers");
    out[std::string(detail::trim(f[0]))] = OddsTriple{*h, *d, *a};
  }
  return out;
}

inline const std::vector<std::string>& results_csv_columns() {
  static const std::vector<std::string> cols{"game_id",   "season",    "league",     "round",
                                             "home_team", "away_team", "home_goals", "away_goals"};
  return cols;
}

inline std::vector<GameResult> parse_results_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("empty results file");
  detail::check_header(line, results_csv_columns());
  std::vector<GameResult> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv(detail::trim(line));
    if (f.size() != 8) throw RowError(lineno, "expected 8 fields");
    const auto round = detail::parse_int(f[3]);
    const auto hg = detail::parse_int(f[6]), ag = detail::parse_int(f[7]);
    if (!round || !hg || !ag || *hg < 0 || *ag < 0) throw RowError(lineno, "round and goals must be integers");
    out.push_back({std::string(detail::trim(f[0])), std::string(detail::trim(f[1])),
                   std::string(detail::trim(f[2])), static_cast<int>(*round), std::string(detail::trim(f[4])),
                   std::string(detail::trim(f[5])), static_cast<int>(*hg), static_cast<int>(*ag)});
  }
  return out;
}

inline std::vector<GameResult> parse_results_csv(const std::string& path) {
  auto in = detail::open_input(path);
  return parse_results_csv(in);
}

inline void write_results_csv(std::ostream& out, const std::vector<GameResult>& results) {
  const auto& cols = results_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << '\n';
  for (const auto& r : results) {
    out << r.game_id << ',' << r.season << ',' << r.league << ',' << r.round << ',' << r.home_team << ','
        << r.away_team << ',' << r.home_goals << ',' << r.away_goals << '\n';
  }
}

struct CommentaryWarning {
  std::size_t line = 0;
  std::string text;
};

struct CommentaryParse {
  std::vector<MatchEvent> events;
  std::vector<CommentaryWarning> warnings;      // unparseable lines (skipped)
  std::vector<CommentaryWarning> unattributed;  // events naming neither team (kept, unattributed)
  std::size_t event_lines = 0;                  // non-blank input lines
};

// Grammar, one entry per line:
//   <minute>' <EventPhrase> by <TeamName>
//   [<minute>'] First half begins | Second half begins | Game ends
// with <minute> either "m" or "m+k" (added time). Second-half minutes use the
// match clock (46..90, 90+k) and are stored relative to the half.
// Minutes that run backwards are clamped to the running maximum of their half;
// a "Game ends" line that opens a half is moved to that half's final minute.
inline CommentaryParse parse_commentary(std::istream& lines, const std::string& home_team,
                                        const std::string& away_team, const std::string& game_id = {}) {
  static const std::regex event_re(
      R"(^\s*(\d+)(?:\+(\d+))?'\s+(Shot attempt|Corner|Goal scored|Red card|Yellow card)\s+by\s+(.+?)\s*$)");
  static const std::regex control_re(
      R"(^\s*(?:(\d+)(?:\+(\d+))?'\s+)?(First half begins|Second half begins|Game ends)\s*$)");

  CommentaryParse out;
  struct Pending {
    MatchEvent event;
    bool relocate = false;
  };
  std::array<std::vector<Pending>, 2> halves;
  int half = 1;
  std::string line;
  std::size_t lineno = 0;

  auto in_half_minute = [&](int clock, int added) {
    const int base = half == 1 ? clock : clock - 45;
    return base + added;
  };

  while (std::getline(lines, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    ++out.event_lines;
    std::smatch m;
    if (std::regex_match(line, m, event_re)) {
      MatchEvent e;
      e.game_id = game_id;
      e.half = half;
      e.minute = in_half_minute(std::stoi(m[1].str()), m[2].matched ? std::stoi(m[2].str()) : 0);
      const auto phrase = m[3].str();
      if (phrase == "Shot attempt") e.kind = EventKind::shot_attempt;
      else if (phrase == "Corner") e.kind = EventKind::corner;
      else if (phrase == "Goal scored") e.kind = EventKind::goal;
      else if (phrase == "Red card") e.kind = EventKind::red_card;
      else e.kind = EventKind::yellow_card;
      const auto team = m[4].str();
      if (team == home_team || team == away_team) {
        e.team = team;
      } else {
        e.attributed = false;
        out.unattributed.push_back({lineno, line});
      }
      halves[half - 1].push_back({std::move(e), false});
    } else if (std::regex_match(line, m, control_re)) {
      const auto phrase = m[3].str();
      MatchEvent e;
      e.game_id = game_id;
      e.attributed = true;
      if (phrase == "Second half begins") half = 2;
      e.half = half;
      e.minute = m[1].matched ? in_half_minute(std::stoi(m[1].str()), m[2].matched ? std::stoi(m[2].str()) : 0) : 1;
      bool relocate = false;
      if (phrase == "First half begins") {
        e.kind = EventKind::game_start;
      } else if (phrase == "Second half begins") {
        e.kind = EventKind::half_start;
      } else {
        e.kind = EventKind::game_end;
        const auto& cur = halves[half - 1];
        relocate = std::none_of(cur.begin(), cur.end(), [](const Pending& p) {
          return p.event.kind != EventKind::game_start && p.event.kind != EventKind::half_start &&
                 p.event.kind != EventKind::game_end;
        });
      }
      halves[half - 1].push_back({std::move(e), relocate});
    } else {
      out.warnings.push_back({lineno, line});
    }
  }

  for (auto& events : halves) {
    int running_max = 1;
    std::vector<MatchEvent> kept, moved;
    for (auto& p : events) {
      p.event.minute = std::max(p.event.minute, running_max);
      if (p.relocate) {
        moved.push_back(std::move(p.event));
      } else {
        running_max = p.event.minute;
        kept.push_back(std::move(p.event));
      }
    }
    for (auto& e : moved) {
      e.minute = running_max;
      kept.push_back(std::move(e));
    }
    for (auto& e : kept) out.events.push_back(std::move(e));
  }
  return out;
}

// Final score implied by the goal events of a game.
inline GameResult game_result(const std::vector<MatchEvent>& events, const GameDescriptor& game) {
  GameResult r{game.game_id, game.season, game.league, game.round, game.home_team, game.away_team, 0, 0};
  for (const auto& e : events) {
    if (e.kind != EventKind::goal || !e.attributed) continue;
    if (e.team == game.home_team) ++r.home_goals;
    else if (e.team == game.away_team) ++r.away_goals;
  }
  return r;
}

// Expands a game's events into 2 rows per minute (home row first). Context
// diffs describe the state at the start of each minute, so an event in minute
// m first shows up in the diffs of minute m + 1.
inline std::vector<MinuteObservation> events_to_minutes(const std::vector<MatchEvent>& events,
                                                        const OddsTriple& odds, const GameDescriptor& game) {
  const auto probs = odds_to_win_prob(odds);
  const double wp_home = probs.home_minus_away();

  std::array<int, 2> minutes_in_half{45, 45};
  bool second_half_seen = false;
  for (const auto& e : events) {
    if (e.half < 1 || e.half > 2 || e.minute < 1) throw PreconditionError("event with invalid half/minute");
    minutes_in_half[e.half - 1] = std::max(minutes_in_half[e.half - 1], e.minute);
    if (e.half == 2) second_half_seen = true;
  }
  if (!second_half_seen) throw PreconditionError("game " + game.game_id + ": second half missing from events");

  const auto result = game_result(events, game);
  if ((game.home_goals && *game.home_goals != result.home_goals) ||
      (game.away_goals && *game.away_goals != result.away_goals)) {
    throw ConsistencyError("game " + game.game_id + ": goal events give " + std::to_string(result.home_goals) + "-" +
                           std::to_string(result.away_goals) + " but the reported final score differs");
  }

  struct Tally {
    int shots = 0, corners = 0, goals = 0, reds = 0;
  };
  // [half][minute][side]
  std::array<std::vector<std::array<Tally, 2>>, 2> tally;
  for (int h = 0; h < 2; ++h) tally[h].assign(static_cast<std::size_t>(minutes_in_half[h]) + 1, {});
  for (const auto& e : events) {
    if (!e.attributed || e.team.empty()) continue;
    int side;
    if (e.team == game.home_team) side = 0;
    else if (e.team == game.away_team) side = 1;
    else continue;
    auto& t = tally[e.half - 1][e.minute][side];
    switch (e.kind) {
      case EventKind::shot_attempt: ++t.shots; break;
      case EventKind::corner: ++t.corners; break;
      case EventKind::goal: ++t.goals; break;
      case EventKind::red_card: ++t.reds; break;
      default: break;
    }
  }

  std::vector<MinuteObservation> rows;
  rows.reserve(2 * static_cast<std::size_t>(minutes_in_half[0] + minutes_in_half[1]));
  std::array<int, 2> goals{0, 0}, reds{0, 0};
  for (int h = 0; h < 2; ++h) {
    for (int m = 1; m <= minutes_in_half[h]; ++m) {
      const auto& t = tally[h][m];
      for (int side = 0; side < 2; ++side) {
        MinuteObservation o;
        o.game_id = game.game_id;
        o.team = side == 0 ? game.home_team : game.away_team;
        o.opponent = side == 0 ? game.away_team : game.home_team;
        o.home = side == 0;
        o.season = game.season;
        o.league = game.league;
        o.half = h + 1;
        o.minute = m;
        o.score_diff = goals[side] - goals[1 - side];
        o.red_card_diff = reds[side] - reds[1 - side];
        o.win_prob_diff = side == 0 ? wp_home : -wp_home;
        o.shots = t[side].shots;
        o.corners = t[side].corners;
        rows.push_back(std::move(o));
      }
      for (int side = 0; side < 2; ++side) {
        goals[side] += t[side].goals;
        reds[side] += t[side].reds;
      }
    }
  }
  return rows;
}

inline MinuteObservation apply_binning(MinuteObservation obs, const BinningPolicy& policy) {
  obs.score_diff = std::clamp(obs.score_diff, -policy.score_cap, policy.score_cap);
  obs.red_card_diff = std::clamp(obs.red_card_diff, -policy.red_card_cap, policy.red_card_cap);
  obs.minute = std::min(obs.minute, policy.minute_cap);
  return obs;
}

// Team-level context tallies of a minute set (Table-1 style breakdown).
struct ContextBreakdown {
  double up1goal_stat = 0, up1goal_min = 0;
  double down1goal_stat = 0, down1goal_min = 0;
  double up1man_stat = 0, up1man_min = 0;
  double down1man_stat = 0, down1man_min = 0;

  void add(const MinuteObservation& o, Stat stat) {
    const double c = o.count(stat);
    if (o.score_diff >= 1) up1goal_stat += c, up1goal_min += 1;
    if (o.score_diff <= -1) down1goal_stat += c, down1goal_min += 1;
    if (o.red_card_diff <= -1) up1man_stat += c, up1man_min += 1;
    if (o.red_card_diff >= 1) down1man_stat += c, down1man_min += 1;
  }
};

}  // namespace ctxadjust
