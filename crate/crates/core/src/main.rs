fn main() {
    std::process::exit(crscombine::cli::run(std::env::args_os()));
}
