#include <csignal>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "stpark/checkpoint.hpp"
#include "stpark/commands.hpp"
#include "stpark/config.hpp"
#include "stpark/service.hpp"

namespace {

stpark::ForecastServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

std::vector<std::string> split_csv(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stpark: spatio-temporal parking availability forecasting"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint and a JSON-lines log");
  train->add_option("--config", config_path, "JSON config with data, model and train sections")->required();

  std::string ckpt;
  std::string data_dir;
  auto* eval = app.add_subcommand("eval", "Report test-split metrics of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Directory with pa.csv, lots.csv, weather.csv")->required();

  std::string lots;
  auto* predict = app.add_subcommand("predict", "Forecast the next horizon from the latest window");
  predict->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  predict->add_option("--data", data_dir, "Dataset directory")->required();
  predict->add_option("--lots", lots, "Comma-separated lot ids (default: all)");

  std::size_t n_lots = 20;
  std::size_t n_days = 30;
  std::uint64_t seed = 7;
  std::string out_dir;
  auto* synth = app.add_subcommand("synth", "Write a synthetic ring-of-lots dataset as CSV");
  synth->add_option("--lots", n_lots, "Number of lots")->check(CLI::Range(2, 100000));
  synth->add_option("--days", n_days, "Number of days")->check(CLI::Range(1, 100000));
  synth->add_option("--seed", seed, "Generator seed");
  synth->add_option("--out", out_dir, "Output directory")->required();

  std::string variant = "gco";
  std::vector<std::size_t> bench_lots = stpark::kBenchLots;
  auto* bench = app.add_subcommand("bench", "Time one spatial mixing step, forward and backward");
  bench->add_option("--variant", variant, "gco or msa")->check(CLI::IsMember({"gco", "msa"}));
  bench->add_option("--lots", bench_lots, "Lot counts to time");

  int port = 8080;
  std::string host = "127.0.0.1";
  auto* serve = app.add_subcommand("serve", "Serve GET /forecast and GET /health");
  serve->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  serve->add_option("--data", data_dir, "Dataset directory")->required();
  serve->add_option("--port", port, "TCP port (0 picks one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "Bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << stpark::error_line("usage_error", e.what()) << "\n";
    return 1;
  }

  try {
    if (*train) {
      stpark::RunConfig config = stpark::load_run_config(config_path);
      stpark::apply_env_overrides(config);
      stpark::cmd_train(config, std::cout);
    } else if (*eval) {
      stpark::cmd_eval(ckpt, data_dir, std::cout);
    } else if (*predict) {
      stpark::cmd_predict(ckpt, data_dir, split_csv(lots), std::cout);
    } else if (*synth) {
      stpark::cmd_synth(n_lots, n_days, seed, out_dir);
    } else if (*bench) {
      stpark::cmd_bench(variant, bench_lots, std::cout);
    } else if (*serve) {
      auto forecaster =
          std::make_shared<const stpark::Forecaster>(stpark::load_checkpoint(ckpt), stpark::load_dataset_dir(data_dir));
      stpark::ForecastServer server(forecaster);
      const int bound = server.bind(host, port);
      std::cout << "listening " << host << ":" << bound << " digest " << forecaster->digest() << "\n" << std::flush;
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      server.serve();
      g_server = nullptr;
    }
  } catch (const std::exception& e) {
    std::cerr << stpark::error_line(e) << "\n";
    return 1;
  }
  return 0;
}
