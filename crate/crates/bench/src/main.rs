fn main() { std::process::exit(dckf_bench::cli::main_with_args(std::env::args_os())) }
