fn main() {
    std::process::exit(sparsifiner_bench::main_with_args(std::env::args_os()));
}
