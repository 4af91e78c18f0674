fn main() {
    std::process::exit(context_maps::cli::run(std::env::args_os()));
}
