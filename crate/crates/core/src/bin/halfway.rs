fn main() {
    std::process::exit(halfway_sceneflow::cli::run(std::env::args_os()));
}
