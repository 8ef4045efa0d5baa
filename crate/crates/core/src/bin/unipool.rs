fn main() {
    std::process::exit(unipool::cli::main_exit_code());
}
