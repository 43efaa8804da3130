fn main() {
    std::process::exit(guidemt::cli::run(std::env::args_os()));
}
