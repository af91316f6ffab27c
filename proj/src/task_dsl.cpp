#include "lldm/task_dsl.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <memory>
#include <sstream>
#include <unordered_set>

namespace lldm {

namespace {

constexpr int kMaxDepth = 64;

struct Node {
  bool is_list = false;
  std::string atom;
  std::vector<Node> items;
  int line = 1;
  int column = 1;
};

// Builds the s-expression forest iteratively so hostile input cannot exhaust
// the call stack.
std::vector<Node> read_forest(std::string_view text) {
  std::vector<Node> roots;
  std::vector<Node> stack;
  int line = 1, column = 1;
  std::size_t i = 0;
  auto advance = [&](char c) {
    if (c == '\n') {
      ++line;
      column = 1;
    } else {
      ++column;
    }
  };
  auto emit = [&](Node n) {
    if (stack.empty()) {
      roots.push_back(std::move(n));
    } else {
      stack.back().items.push_back(std::move(n));
    }
  };
  while (i < text.size()) {
    const char c = text[i];
    if (c == ';') {
      while (i < text.size() && text[i] != '\n') advance(text[i++]);
      continue;
    }
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
      advance(c);
      ++i;
      continue;
    }
    if (c == '(') {
      if (static_cast<int>(stack.size()) >= kMaxDepth) {
        throw ParseError(ParseErrorCode::kSyntax, line, column, "nesting too deep");
      }
      Node n;
      n.is_list = true;
      n.line = line;
      n.column = column;
      stack.push_back(std::move(n));
      advance(c);
      ++i;
      continue;
    }
    if (c == ')') {
      if (stack.empty()) {
        throw ParseError(ParseErrorCode::kUnbalancedParens, line, column, "unexpected ')'");
      }
      Node n = std::move(stack.back());
      stack.pop_back();
      emit(std::move(n));
      advance(c);
      ++i;
      continue;
    }
    Node atom;
    atom.line = line;
    atom.column = column;
    while (i < text.size()) {
      const char d = text[i];
      if (d == '(' || d == ')' || d == ';' || d == ' ' || d == '\t' || d == '\n' ||
          d == '\r' || d == '\f' || d == '\v') {
        break;
      }
      atom.atom.push_back(d);
      advance(d);
      ++i;
    }
    emit(std::move(atom));
  }
  if (!stack.empty()) {
    const Node& open = stack.back();
    throw ParseError(ParseErrorCode::kUnbalancedParens, open.line, open.column,
                     "unclosed '('");
  }
  return roots;
}

[[noreturn]] void fail(ParseErrorCode code, const Node& at, const std::string& msg) {
  throw ParseError(code, at.line, at.column, msg);
}

const std::string& expect_atom(const Node& n, const char* what) {
  if (n.is_list) fail(ParseErrorCode::kSyntax, n, std::string("expected ") + what);
  return n.atom;
}

double parse_number(const Node& n) {
  if (n.is_list) fail(ParseErrorCode::kMalformedRange, n, "expected a number");
  const std::string& s = n.atom;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (first != last && *first == '+') ++first;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    fail(ParseErrorCode::kMalformedRange, n, "not a finite number: '" + s + "'");
  }
  return v;
}

// Accepts `((a b c d) ...)` as in the listing, or the rows given directly.
std::vector<const Node*> range_rows(const Node& section) {
  std::vector<const Node*> rows;
  for (std::size_t k = 1; k < section.items.size(); ++k) {
    const Node& item = section.items[k];
    if (!item.is_list) fail(ParseErrorCode::kMalformedRange, item, "expected a parenthesized range");
    const bool nested = !item.items.empty() &&
                        std::all_of(item.items.begin(), item.items.end(),
                                    [](const Node& x) { return x.is_list; });
    if (nested || item.items.empty()) {
      for (const Node& row : item.items) rows.push_back(&row);
    } else {
      rows.push_back(&item);
    }
  }
  return rows;
}

RegionSpec parse_region(const Node& n) {
  if (!n.is_list || n.items.empty()) fail(ParseErrorCode::kSyntax, n, "expected a region");
  RegionSpec r;
  r.name = expect_atom(n.items[0], "region name");
  bool seen_target = false, seen_ranges = false, seen_yaw = false;
  for (std::size_t k = 1; k < n.items.size(); ++k) {
    const Node& sec = n.items[k];
    if (!sec.is_list || sec.items.empty() || sec.items[0].is_list) {
      fail(ParseErrorCode::kSyntax, sec, "expected a region attribute");
    }
    const std::string& key = sec.items[0].atom;
    if (key == ":target") {
      if (seen_target) fail(ParseErrorCode::kDuplicateName, sec, "repeated :target");
      seen_target = true;
      if (sec.items.size() != 2) fail(ParseErrorCode::kSyntax, sec, ":target takes one name");
      r.target = expect_atom(sec.items[1], "target name");
    } else if (key == ":ranges") {
      if (seen_ranges) fail(ParseErrorCode::kDuplicateName, sec, "repeated :ranges");
      seen_ranges = true;
      for (const Node* row : range_rows(sec)) {
        if (row->items.size() != 4) fail(ParseErrorCode::kMalformedRange, *row, "range needs 4 numbers");
        r.ranges.push_back({parse_number(row->items[0]), parse_number(row->items[1]),
                            parse_number(row->items[2]), parse_number(row->items[3])});
      }
    } else if (key == ":yaw_rotation") {
      if (seen_yaw) fail(ParseErrorCode::kDuplicateName, sec, "repeated :yaw_rotation");
      seen_yaw = true;
      for (const Node* row : range_rows(sec)) {
        if (row->items.size() != 2) fail(ParseErrorCode::kMalformedRange, *row, "yaw interval needs 2 numbers");
        r.yaw.push_back({parse_number(row->items[0]), parse_number(row->items[1])});
      }
    } else {
      fail(ParseErrorCode::kUnknownSection, sec, "unknown region attribute '" + key + "'");
    }
  }
  if (!seen_target) fail(ParseErrorCode::kSyntax, n, "region '" + r.name + "' has no :target");
  return r;
}

std::vector<Instance> parse_instances(const Node& sec) {
  std::vector<Instance> out;
  const auto& it = sec.items;
  std::size_t k = 1;
  while (k < it.size()) {
    const std::string& name = expect_atom(it[k], "instance name");
    if (k + 2 >= it.size()) fail(ParseErrorCode::kSyntax, it[k], "expected 'name - type'");
    if (expect_atom(it[k + 1], "'-'") != "-") fail(ParseErrorCode::kSyntax, it[k + 1], "expected '-'");
    out.push_back({name, expect_atom(it[k + 2], "type name")});
    k += 3;
  }
  return out;
}

Predicate parse_predicate(const Node& n) {
  if (!n.is_list || n.items.empty()) fail(ParseErrorCode::kSyntax, n, "expected a predicate");
  Predicate p;
  p.name = expect_atom(n.items[0], "predicate name");
  std::string lower = p.name;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower == "not" || lower == "or" || lower == "and") {
    fail(ParseErrorCode::kSyntax, n, "only a positive conjunction of atoms is supported");
  }
  for (std::size_t k = 1; k < n.items.size(); ++k) {
    p.args.push_back(expect_atom(n.items[k], "predicate argument"));
  }
  return p;
}

bool is_and(const std::string& s) { return s == "And" || s == "and" || s == "AND"; }

}  // namespace

std::string Predicate::str() const {
  std::string s = "(" + name;
  for (const auto& a : args) s += " " + a;
  return s + ")";
}

const RegionSpec* ProblemSpec::find_region(std::string_view qualified) const {
  for (const auto& r : regions) {
    if (r.qualified_name() == qualified) return &r;
  }
  return nullptr;
}

const Instance* ProblemSpec::find_fixture(std::string_view n) const {
  for (const auto& f : fixtures) {
    if (f.name == n) return &f;
  }
  return nullptr;
}

const Instance* ProblemSpec::find_object(std::string_view n) const {
  for (const auto& o : objects) {
    if (o.name == n) return &o;
  }
  return nullptr;
}

const char* to_string(ParseErrorCode code) {
  switch (code) {
    case ParseErrorCode::kUnbalancedParens: return "UnbalancedParens";
    case ParseErrorCode::kUnknownSection: return "UnknownSection";
    case ParseErrorCode::kMalformedRange: return "MalformedRange";
    case ParseErrorCode::kDuplicateName: return "DuplicateName";
    case ParseErrorCode::kSyntax: return "Syntax";
  }
  return "?";
}

ParseError::ParseError(ParseErrorCode code, int line, int column, const std::string& what)
    : std::runtime_error(std::string(to_string(code)) + " at " + std::to_string(line) + ":" +
                         std::to_string(column) + ": " + what),
      code_(code),
      line_(line),
      column_(column) {}

ProblemSpec parse_problem(std::string_view text) {
  std::vector<Node> forest = read_forest(text);
  if (forest.size() != 1) {
    const int line = forest.empty() ? 1 : forest[1].line;
    const int col = forest.empty() ? 1 : forest[1].column;
    throw ParseError(ParseErrorCode::kSyntax, line, col, "expected exactly one (define ...) form");
  }
  const Node& root = forest[0];
  if (!root.is_list || root.items.size() < 2 || root.items[0].is_list ||
      root.items[0].atom != "define") {
    fail(ParseErrorCode::kSyntax, root, "expected (define (problem NAME) ...)");
  }
  const Node& head = root.items[1];
  if (!head.is_list || head.items.size() != 2 || head.items[0].is_list ||
      head.items[0].atom != "problem") {
    fail(ParseErrorCode::kSyntax, head, "expected (problem NAME)");
  }
  ProblemSpec spec;
  spec.name = expect_atom(head.items[1], "problem name");

  std::unordered_set<std::string> seen;
  for (std::size_t k = 2; k < root.items.size(); ++k) {
    const Node& sec = root.items[k];
    if (!sec.is_list || sec.items.empty() || sec.items[0].is_list) {
      fail(ParseErrorCode::kSyntax, sec, "expected a (:section ...)");
    }
    const std::string& key = sec.items[0].atom;
    static const std::unordered_set<std::string> kKnown = {
        ":domain", ":language", ":regions", ":fixtures", ":objects",
        ":obj_of_interest", ":init", ":goal"};
    if (!kKnown.contains(key)) fail(ParseErrorCode::kUnknownSection, sec, "unknown section '" + key + "'");
    if (!seen.insert(key).second) fail(ParseErrorCode::kDuplicateName, sec, "repeated section '" + key + "'");

    if (key == ":domain") {
      if (sec.items.size() != 2) fail(ParseErrorCode::kSyntax, sec, ":domain takes one name");
      spec.domain = expect_atom(sec.items[1], "domain name");
    } else if (key == ":language") {
      std::string words;
      for (std::size_t w = 1; w < sec.items.size(); ++w) {
        if (w > 1) words += ' ';
        words += expect_atom(sec.items[w], "instruction word");
      }
      spec.language = std::move(words);
    } else if (key == ":regions") {
      std::unordered_set<std::string> names;
      for (std::size_t r = 1; r < sec.items.size(); ++r) {
        RegionSpec region = parse_region(sec.items[r]);
        if (!names.insert(region.qualified_name()).second) {
          fail(ParseErrorCode::kDuplicateName, sec.items[r], "repeated region '" + region.name + "'");
        }
        spec.regions.push_back(std::move(region));
      }
    } else if (key == ":fixtures") {
      spec.fixtures = parse_instances(sec);
    } else if (key == ":objects") {
      spec.objects = parse_instances(sec);
    } else if (key == ":obj_of_interest") {
      for (std::size_t w = 1; w < sec.items.size(); ++w) {
        spec.objects_of_interest.push_back(expect_atom(sec.items[w], "instance name"));
      }
    } else if (key == ":init") {
      for (std::size_t w = 1; w < sec.items.size(); ++w) {
        spec.init.push_back(parse_predicate(sec.items[w]));
      }
    } else if (key == ":goal") {
      if (sec.items.size() != 2) fail(ParseErrorCode::kSyntax, sec, ":goal takes one formula");
      const Node& f = sec.items[1];
      if (!f.is_list || f.items.empty() || f.items[0].is_list) {
        fail(ParseErrorCode::kSyntax, f, "expected a goal formula");
      }
      if (is_and(f.items[0].atom)) {
        for (std::size_t w = 1; w < f.items.size(); ++w) {
          spec.goal.conjuncts.push_back(parse_predicate(f.items[w]));
        }
      } else {
        spec.goal.conjuncts.push_back(parse_predicate(f));
      }
    }
  }
  return spec;
}

std::string format_number(double v) {
  if (v == 0.0) return std::signbit(v) ? "-0.0" : "0.0";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, ptr);
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

std::string serialize_problem(const ProblemSpec& spec) {
  std::ostringstream os;
  auto list_section = [&](const char* key, const std::vector<std::string>& lines) {
    if (lines.empty()) {
      os << "  (" << key << ")\n";
      return;
    }
    os << "  (" << key << "\n";
    for (const auto& l : lines) os << "    " << l << "\n";
    os << "  )\n";
  };
  os << "(define (problem " << spec.name << ")\n";
  os << "  (:domain " << spec.domain << ")\n";
  if (spec.language.empty()) {
    os << "  (:language)\n";
  } else {
    os << "  (:language " << spec.language << ")\n";
  }
  if (spec.regions.empty()) {
    os << "  (:regions)\n";
  } else {
    os << "  (:regions\n";
    for (const auto& r : spec.regions) {
      os << "    (" << r.name << "\n";
      os << "      (:target " << r.target << ")\n";
      if (!r.ranges.empty()) {
        os << "      (:ranges (\n";
        for (const auto& q : r.ranges) {
          os << "        (" << format_number(q.xmin) << " " << format_number(q.ymin) << " "
             << format_number(q.xmax) << " " << format_number(q.ymax) << ")\n";
        }
        os << "      ))\n";
      }
      if (!r.yaw.empty()) {
        os << "      (:yaw_rotation (\n";
        for (const auto& y : r.yaw) {
          os << "        (" << format_number(y.lo) << " " << format_number(y.hi) << ")\n";
        }
        os << "      ))\n";
      }
      os << "    )\n";
    }
    os << "  )\n";
  }
  auto instances = [](const std::vector<Instance>& xs) {
    std::vector<std::string> lines;
    for (const auto& x : xs) lines.push_back(x.name + " - " + x.type);
    return lines;
  };
  list_section(":fixtures", instances(spec.fixtures));
  list_section(":objects", instances(spec.objects));
  list_section(":obj_of_interest", spec.objects_of_interest);
  std::vector<std::string> atoms;
  for (const auto& p : spec.init) atoms.push_back(p.str());
  list_section(":init", atoms);
  std::string goal = "(And";
  for (const auto& p : spec.goal.conjuncts) goal += " " + p.str();
  goal += ")";
  list_section(":goal", {goal});
  os << ")\n";
  return os.str();
}

const char* to_string(IssueCode code) {
  switch (code) {
    case IssueCode::kDuplicateName: return "DuplicateName";
    case IssueCode::kUnresolvedReference: return "UnresolvedReference";
    case IssueCode::kUnknownPredicate: return "UnknownPredicate";
    case IssueCode::kBadArity: return "BadArity";
    case IssueCode::kMalformedRegion: return "MalformedRegion";
    case IssueCode::kEmptyGoal: return "EmptyGoal";
  }
  return "?";
}

int predicate_arity(std::string_view name) {
  if (name == "On" || name == "In") return 2;
  if (name == "Open" || name == "Close" || name == "TurnOn" || name == "TurnOff") return 1;
  return 0;
}

std::vector<ValidationIssue> validate(const ProblemSpec& spec) {
  std::vector<ValidationIssue> issues;
  std::unordered_set<std::string> instances;
  for (const auto* group : {&spec.fixtures, &spec.objects}) {
    for (const auto& inst : *group) {
      if (!instances.insert(inst.name).second) {
        issues.push_back({IssueCode::kDuplicateName, inst.name, "instance declared twice"});
      }
    }
  }
  std::unordered_set<std::string> resolvable = instances;
  std::unordered_set<std::string> region_names;
  for (const auto& r : spec.regions) {
    const std::string q = r.qualified_name();
    if (!region_names.insert(q).second) {
      issues.push_back({IssueCode::kDuplicateName, r.name, "region declared twice"});
    }
    resolvable.insert(q);
    if (!instances.contains(r.target)) {
      issues.push_back({IssueCode::kUnresolvedReference, r.target,
                        "target of region '" + r.name + "'"});
    }
    for (const auto& q2 : r.ranges) {
      if (!(q2.xmin <= q2.xmax) || !(q2.ymin <= q2.ymax)) {
        issues.push_back({IssueCode::kMalformedRegion, r.name, "rectangle has min > max"});
      }
    }
    for (const auto& y : r.yaw) {
      if (!(y.lo <= y.hi)) {
        issues.push_back({IssueCode::kMalformedRegion, r.name, "yaw interval has lo > hi"});
      }
    }
  }
  for (const auto& n : spec.objects_of_interest) {
    if (!resolvable.contains(n)) {
      issues.push_back({IssueCode::kUnresolvedReference, n, "in :obj_of_interest"});
    }
  }
  auto check_atom = [&](const Predicate& p, const char* where) {
    const int arity = predicate_arity(p.name);
    if (arity == 0) {
      issues.push_back({IssueCode::kUnknownPredicate, p.name, std::string("in ") + where});
    } else if (static_cast<int>(p.args.size()) != arity) {
      issues.push_back({IssueCode::kBadArity, p.name, p.str()});
    }
    for (const auto& a : p.args) {
      if (!resolvable.contains(a)) {
        issues.push_back({IssueCode::kUnresolvedReference, a, std::string("in ") + where});
      }
    }
  };
  for (const auto& p : spec.init) check_atom(p, ":init");
  if (spec.goal.conjuncts.empty()) {
    issues.push_back({IssueCode::kEmptyGoal, spec.name, "goal has no conjuncts"});
  }
  for (const auto& p : spec.goal.conjuncts) check_atom(p, ":goal");
  return issues;
}

bool eval_goal(const GoalFormula& goal, const PredicateState& state) {
  return std::all_of(goal.conjuncts.begin(), goal.conjuncts.end(),
                     [&](const Predicate& p) { return state.contains(p); });
}

}  // namespace lldm
