// Copyright (c) 2026 The comodnet Authors
// SPDX-License-Identifier: Apache-2.0

#include "comodnet/cli.hpp"

int main(int argc, char** argv) { return comodnet::cli::run_cli(argc, argv); }
