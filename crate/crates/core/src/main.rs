fn main() {
    std::process::exit(molre::cli::main_with(std::env::args_os()));
}
