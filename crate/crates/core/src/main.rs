fn main() {
    std::process::exit(ctrl_rl::cli::main_with(std::env::args_os()));
}
