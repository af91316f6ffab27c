#pragma once

// Scene-description language for tabletop tasks: an s-expression dialect
// with :regions, :fixtures, :objects, :obj_of_interest, :init, :goal and
// :language sections.

#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lldm {

struct Rect {
  double xmin = 0.0, ymin = 0.0, xmax = 0.0, ymax = 0.0;
  bool operator==(const Rect&) const = default;
  bool contains(double x, double y) const {
    return x >= xmin && x <= xmax && y >= ymin && y <= ymax;
  }
};

struct YawInterval {
  double lo = 0.0, hi = 0.0;
  bool operator==(const YawInterval&) const = default;
};

struct RegionSpec {
  std::string name;
  std::string target;
  std::vector<Rect> ranges;       // empty: anchored to the target fixture
  std::vector<YawInterval> yaw;   // empty: no orientation constraint
  bool operator==(const RegionSpec&) const = default;

  // `<target>_<name>`, the form used to reference a region in atoms.
  std::string qualified_name() const { return target + "_" + name; }
};

struct Instance {
  std::string name;
  std::string type;
  bool operator==(const Instance&) const = default;
};

struct Predicate {
  std::string name;
  std::vector<std::string> args;
  auto operator<=>(const Predicate&) const = default;
  std::string str() const;
};

struct GoalFormula {
  std::vector<Predicate> conjuncts;
  bool operator==(const GoalFormula&) const = default;
};

struct ProblemSpec {
  std::string name;
  std::string domain;
  std::string language;  // words joined by single spaces
  std::vector<RegionSpec> regions;
  std::vector<Instance> fixtures;
  std::vector<Instance> objects;
  std::vector<std::string> objects_of_interest;
  std::vector<Predicate> init;
  GoalFormula goal;
  bool operator==(const ProblemSpec&) const = default;

  const RegionSpec* find_region(std::string_view qualified) const;
  const Instance* find_fixture(std::string_view name) const;
  const Instance* find_object(std::string_view name) const;
};

// Ground atoms that currently hold.
using PredicateState = std::set<Predicate>;

enum class ParseErrorCode {
  kUnbalancedParens,
  kUnknownSection,
  kMalformedRange,
  kDuplicateName,
  kSyntax,
};

const char* to_string(ParseErrorCode code);

class ParseError : public std::runtime_error {
 public:
  ParseError(ParseErrorCode code, int line, int column, const std::string& what);
  ParseErrorCode code() const { return code_; }
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  ParseErrorCode code_;
  int line_;
  int column_;
};

ProblemSpec parse_problem(std::string_view text);

// Canonical text: fixed section order, two-space indentation, shortest
// round-trip decimals. parse_problem(serialize_problem(s)) == s.
std::string serialize_problem(const ProblemSpec& spec);

std::string format_number(double v);

enum class IssueCode {
  kDuplicateName,
  kUnresolvedReference,
  kUnknownPredicate,
  kBadArity,
  kMalformedRegion,
  kEmptyGoal,
};

const char* to_string(IssueCode code);

struct ValidationIssue {
  IssueCode code;
  std::string name;
  std::string detail;
};

std::vector<ValidationIssue> validate(const ProblemSpec& spec);

// Arity of a known predicate name, or 0 when the name is not in the dialect.
int predicate_arity(std::string_view name);

bool eval_goal(const GoalFormula& goal, const PredicateState& state);

}  // namespace lldm
