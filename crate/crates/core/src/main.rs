fn main() {
    std::process::exit(onestep_sysid::cli::run(std::env::args_os()));
}
