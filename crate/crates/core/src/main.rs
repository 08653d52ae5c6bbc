fn main() {
    std::process::exit(saltseg::cli::run(std::env::args_os()));
}
