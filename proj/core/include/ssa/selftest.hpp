#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ssa {

struct PropertyResult {
    int criterion = 0;
    std::string name;
    bool passed = false;
    std::string detail;  // measured values, for the report line
    double seconds = 0.0;
};

// Invariant suites; each returns one result per property it checks.
std::vector<PropertyResult> check_doubly_stochastic();  // 100 seeds, 8x8, tau 1, 20 iterations
std::vector<PropertyResult> check_gradients();          // central differences, step 1e-5
std::vector<PropertyResult> check_causality();          // causal decoder, l = 16, b = 4, 20 seeds
std::vector<PropertyResult> check_sortcut_dense();      // hard permutation, full budget
std::vector<PropertyResult> check_identity_sort();      // identity sort vs local attention
std::vector<PropertyResult> check_memory_footnote();    // l = 1024, b = 64 accounting

// Runs the suites for the requested criteria (1..6; empty = all).
std::vector<PropertyResult> run_selftest(const std::vector<int>& criteria = {});

// "PASS [3] name  detail" lines; returns true when everything passed.
bool print_results(std::ostream& os, const std::vector<PropertyResult>& results);

}  // namespace ssa
