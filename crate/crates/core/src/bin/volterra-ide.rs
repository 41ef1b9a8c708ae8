fn main() {
    std::process::exit(volterra_ide::cli::run(std::env::args_os()));
}
