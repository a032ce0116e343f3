fn main() -> std::process::ExitCode {
    heatpinn::cli::main()
}
