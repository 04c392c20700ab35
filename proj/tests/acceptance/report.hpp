#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>

namespace calora::acceptance {

/// One PASS/FAIL line per criterion; exceptions count as failures.
class Report {
 public:
  void run(int id, const std::string& title, const std::function<bool(std::string&)>& body) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = body(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %2d %s  %s  [%s] (%.1f s)\n", id, ok ? "PASS" : "FAIL", title.c_str(), detail.c_str(), secs);
    std::fflush(stdout);
    failures_ += !ok;
  }
  int failures() const { return failures_; }

 private:
  int failures_ = 0;
};

}  // namespace calora::acceptance
