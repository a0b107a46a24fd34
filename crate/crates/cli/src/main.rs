fn main() {
    std::process::exit(maneuverlab_cli::run(std::env::args_os()));
}
