#include "cli_common.hpp"

#include <iostream>

// Exit codes: 0 success, 2 config error, 3 I/O error, 4 numeric failure.
int main(int argc, char** argv) {
  CLI::App app{"JumpReLU sparse autoencoder training, serving and evaluation"};
  app.require_subcommand(1);
  app.allow_config_extras(false);
  for (auto* sub : {&app}) {
    sub->set_config("--config", "", "key=value config file; flags override");
  }

  saekit::cli::register_data_commands(app);
  saekit::cli::register_train_commands(app);
  saekit::cli::register_eval_commands(app);
  for (auto* sub : app.get_subcommands({})) {
    sub->set_config("--config", "", "key=value config file; flags override");
    sub->allow_config_extras(false);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const saekit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const saekit::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const saekit::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
