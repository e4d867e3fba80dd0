#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace cma::cli {

inline constexpr std::string_view kEngineVersion = "1.0.0";

enum ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kDegenerate = 3 };

// Runs one invocation; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

std::string sha256_file(const std::filesystem::path& path);
std::string format_number(double value);  // round-trippable, locale-independent
std::string csv_field(std::string_view text);

}  // namespace cma::cli
