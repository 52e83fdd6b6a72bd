fn main() {
    std::process::exit(ldmic::cli::run(std::env::args_os()));
}
