fn main() -> std::process::ExitCode {
    geocloak::cli::main()
}
