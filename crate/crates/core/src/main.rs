fn main() {
    std::process::exit(weedrep::cli::cli_main(std::env::args_os()));
}
