#include <CLI11.hpp>
#include <iostream>

#include "bsr/harness.hpp"

namespace {

enum Exit { ok = 0, validation = 1, numerical = 2, inconclusive = 3 };

bool flagged_inconclusive(const nlohmann::json& j) {
  if (j.is_object()) {
    if (auto it = j.find("inconclusive"); it != j.end() && it->is_boolean() && it->get<bool>()) return true;
    for (const auto& [k, v] : j.items()) {
      if (flagged_inconclusive(v)) return true;
    }
  }
  if (j.is_array()) {
    for (const auto& v : j) {
      if (flagged_inconclusive(v)) return true;
    }
  }
  return false;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bounded-size rule random graph laboratory"};
  app.require_subcommand(1);
  bsr::harness::ExperimentSpec spec;
  double gamma = 0;
  bool quiet = false;

  const std::vector<std::pair<std::string, std::string>> help{
      {"solve-ode", "integrate the master ODE (--t horizon, --grid steps)"},
      {"tc", "critical time from the operator norm; --n adds a simulation cross-check"},
      {"spectral-profile", "rho_v over the --t list (default: a grid up to 1.25 t_c)"},
      {"perturbation", "log-log slope of |rho_{v,delta} - rho_v| over the --delta list at v = --t"},
      {"simulate", "continuous-time censuses at the --t checkpoints"},
      {"rgiva", "component volume of a root cluster; --chain runs the dominance chain"},
      {"branching", "total progeny samples, tail rate and generation ratio at --t"},
      {"scaling", "R(n,t) = L1 (t_c - t)^2 / log n over the --n and --t lists"},
      {"coupling", "discrete L1 at t against continuous L1 at t + log n / sqrt n"},
      {"audit", "empirical event counts against rate predictions over the window --t v1 v2"}};

  for (const auto& [name, text] : help) {
    auto* sub = app.add_subcommand(name, text);
    sub->add_option("--rule", spec.rule, "builtin name or rule file")->capture_default_str();
    sub->add_option("--n", spec.n, "system size(s)");
    sub->add_option("--t", spec.t, "time(s)");
    sub->add_option("--trials", spec.trials, "independent trials")->capture_default_str();
    sub->add_option("--seed", spec.seed, "master seed")->capture_default_str();
    sub->add_option("--out", spec.out, "output prefix for <out>.csv and <out>.json");
    sub->add_option("--grid", spec.grid, "Nystrom nodes (ODE steps for solve-ode)")->capture_default_str();
    sub->add_option("--delta", spec.delta, "rate inflation(s)");
    sub->add_option("--gamma", gamma, "inflation delta_n = n^-gamma");
    sub->add_option("--lambda", spec.lambda, "window constant in t <= t_c - lambda n^-1/3")->capture_default_str();
    sub->add_option("--threads", spec.control.threads, "worker threads (0: all cores)");
    sub->add_option("--budget", spec.control.budget_seconds, "wall-time budget in seconds (0: none)");
    sub->add_option("--cache", spec.cache_dir, "directory for cached critical runs");
    sub->add_flag("--chain", spec.chain, "rgiva: run C_n^0 <= C^RG <= G");
    sub->add_flag("--quiet", quiet, "do not print the payload");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? ok : validation;
  }

  try {
    spec.kind = bsr::harness::kind_from_name(app.get_subcommands().front()->get_name());
    if (app.get_subcommands().front()->count("--gamma")) spec.gamma = gamma;
    const auto rec = bsr::harness::run(spec);
    if (!quiet) std::cout << rec.payload.dump(2) << '\n';
    if (!rec.complete) {
      std::cerr << "incomplete: wall-time budget reached, partial results kept\n";
      return inconclusive;
    }
    return flagged_inconclusive(rec.payload) ? inconclusive : ok;
  } catch (const bsr::MalformedInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return validation;
  } catch (const bsr::Inconclusive& e) {
    std::cerr << "inconclusive: " << e.what() << '\n';
    return inconclusive;
  } catch (const bsr::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return numerical;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return validation;
  }
}
