fn main() {
    std::process::exit(flowpref::cli::main_with(std::env::args_os()));
}
