fn main() -> anyhow::Result<()> {
    mglab::cli::main()
}
