// Trusted-world process for the two-process transport: reads framed requests on
// stdin, answers on stdout.

#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "dtz/worlds/transport.hpp"

int main(int argc, char** argv) {
  CLI::App app{"dtz trusted application"};
  std::string sealed_path, key_path;
  std::uint64_t budget = 14 * dtz::kMiB;
  std::uint64_t buffer = 2 * dtz::kMiB;
  bool allow_raw = false;
  app.add_option("--sealed", sealed_path, "sealed model container")->required();
  app.add_option("--key", key_path, "16-byte key file")->required();
  app.add_option("--budget", budget, "secure bytes available to the trusted application")->required();
  app.add_option("--buffer", buffer, "shared buffer bytes per frame");
  app.add_flag("--allow-raw", allow_raw, "permit unsanitized output (baseline runs)");
  CLI11_PARSE(app, argc, argv);

  try {
    dtz::TrustedOptions opt;
    opt.budget = dtz::SecureBudget::with_available(budget, buffer);
    opt.allow_raw = allow_raw;
    opt.preloaded_sealed = dtz::read_binary_file(sealed_path);
    dtz::TrustedApp ta(dtz::KeyHandle(dtz::load_key(key_path)), std::move(opt));

    for (;;) {
      std::optional<dtz::Message> request;
      try {
        request = dtz::read_message(STDIN_FILENO, buffer);
      } catch (const dtz::Error& e) {
        // The stream cannot be resynchronized after a framing error.
        dtz::detail::write_all(STDOUT_FILENO, dtz::encode_frames(dtz::error_message(e.kind(), e.what()), buffer));
        return 1;
      }
      if (!request) return 0;
      const auto reply = ta.handle(*request);
      dtz::detail::write_all(STDOUT_FILENO, dtz::encode_frames(reply, buffer));
    }
  } catch (const dtz::Error& e) {
    std::cerr << "dtz_ta: " << e.what() << "\n";
    return e.kind() == dtz::ErrorKind::authentication ? 3 : 2;
  }
}
