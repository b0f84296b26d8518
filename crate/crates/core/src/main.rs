fn main() {
    std::process::exit(bake_kit::cli::run(std::env::args_os()));
}
