#pragma once

// The `mrnn` command-line tool: synth, train, generate, eval, gradcheck, nearest.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mrnn::cli {

inline constexpr std::string_view kToolVersion = "0.1.0";

/// Runs one invocation. args[0] is the program name. Normal output goes to
/// `out`; failures print a single `error: <category>: <message>` line to `err`
/// and return a nonzero code (2 for usage errors, 1 otherwise).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);
/// 16 lowercase hex digits of fnv1a64 over the file's bytes.
std::string hash_file(const std::filesystem::path& path);

/// Replaces `--config FILE` after a subcommand with `--key=value` arguments read
/// from FILE (flat `key = value` lines, `#` comments). The expanded arguments
/// precede the remaining command-line ones, so explicit flags win.
std::vector<std::string> expand_config(const std::vector<std::string>& args);

class CliError : public std::runtime_error {
 public:
  CliError(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}
  const std::string& category() const { return category_; }

 private:
  std::string category_;
};

}  // namespace mrnn::cli
