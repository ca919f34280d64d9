#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "optrad/optrad.h"

namespace {

const char* kVerbs[][2] = {
    {"fit-basis", "Fit a contracted radial basis and write spline tables"},
    {"compute-features", "Compute invariant features from basis artifacts"},
    {"select", "Select feature columns (CUR or FPS)"},
    {"gfre", "Feature-space reconstruction error (pair or qmax curve)"},
    {"train", "Fit a regression model with cross-validation"},
    {"predict", "Predict energies and forces with a trained model"},
    {"check", "Run the invariant and accuracy self-check suite"},
};

bool read_file(const std::string& path, std::string& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  std::ostringstream ss;
  ss << in.rdbuf();
  out = ss.str();
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"optrad: optimal radial bases and density-correlation features"};
  app.require_subcommand(1, 1);
  std::string config_path, output_dir;
  int workers = -1;
  std::int64_t seed = -1;
  for (const auto& v : kVerbs) {
    auto* sub = app.add_subcommand(v[0], v[1]);
    sub->add_option("-c,--config", config_path, "JSON job configuration");
    sub->add_option("-o,--output-dir", output_dir, "Output directory");
    sub->add_option("-w,--workers", workers, "Worker threads (0 = all cores)")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("-s,--seed", seed, "Global seed")->check(CLI::NonNegativeNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string verb = app.get_subcommands().front()->get_name();

  std::string config = "{}";
  if (!config_path.empty() && !read_file(config_path, config)) {
    std::cerr << "error: cli: cannot read config file '" << config_path << "'\n";
    return 1;
  }
  char* report = nullptr;
  const auto status = optrad_run_command(
      verb.c_str(), config.c_str(), output_dir.empty() ? nullptr : output_dir.c_str(),
      workers, seed, &report);
  if (status != OPTRAD_OK) {
    std::cerr << "error: " << optrad_last_error() << "\n";
    return static_cast<int>(status);
  }
  const auto j = nlohmann::json::parse(report);
  optrad_string_free(report);
  for (const auto& w : j.at("warnings")) {
    std::cerr << "warning: " << w.get<std::string>() << "\n";
  }
  std::cout << j.at("report").dump(2) << "\n";
  return j.at("passed").get<bool>() ? 0 : 2;
}
