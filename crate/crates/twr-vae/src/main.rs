fn main() {
    std::process::exit(twr_vae::cli::run_command(std::env::args_os()));
}
