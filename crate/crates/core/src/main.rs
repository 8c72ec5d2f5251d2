fn main() {
    std::process::exit(fwdguess::cli::run(std::env::args_os()));
}
